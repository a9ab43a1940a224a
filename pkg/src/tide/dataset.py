"""Candidate scoring, five-level ranking, winning/losing pair curation, the
synthetic subject/instruction generator, and the line-delimited manifest format.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import ImageEncoder, ModelConfig, TextEncoder
from .numerics import load_tensor, save_tensor

__all__ = [
    "DegenerateEmbeddingError",
    "EmptyPoolError",
    "ManifestParseError",
    "IntegrityError",
    "World",
    "Candidate",
    "ScoredCandidate",
    "PreferencePairRecord",
    "Manifest",
    "make_encoders",
    "EncoderSpec",
    "score_candidate",
    "rank_levels",
    "rank_by_group",
    "make_pairs",
    "synth_triplets",
    "build_candidates",
    "build_manifest",
    "save_manifest",
    "load_manifest",
    "config_hash",
    "DatasetConfig",
    "Triplet",
    "quality_score",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


class DegenerateEmbeddingError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


class ManifestParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class IntegrityError(ValueError):
    pass


# ---------------------------------------------------------------- synthetic world

PALETTE = np.array(
    [[s0, s1, s2] for s0 in (-1.0, 1.0) for s1 in (-1.0, 1.0) for s2 in (-1.0, 1.0)]
)
PATTERNS = ("hstripe", "vstripe", "checker", "frame")


@dataclass(frozen=True)
class World:
    """Vocabulary and rendering constants of the procedural subject world.

    Subjects are two-colour patterns in one quadrant; the reference shows the
    subject on a neutral (zero) backdrop; instructions name a new background
    colour and, for some instances, a new quadrant.
    """

    image_size: int = 8
    channels: int = 3
    subject_size: int = 4
    bg_scale: float = 0.3
    pixel_noise: float = 0.02
    move_prob: float = 0.0
    ignore_fade: float = 0.3

    # token ids
    SUBJECT: int = 0
    ON: int = 1
    AT: int = 2
    COLOR0: int = 3
    QUAD0: int = 3 + len(PALETTE)

    @property
    def n_colors(self) -> int:
        return len(PALETTE)

    @property
    def n_quadrants(self) -> int:
        return (self.image_size // self.subject_size) ** 2

    @property
    def vocab_used(self) -> int:
        return self.QUAD0 + self.n_quadrants

    def color_token(self, k: int) -> int:
        return self.COLOR0 + k

    def quad_token(self, q: int) -> int:
        return self.QUAD0 + q

    def background(self, k: int | None, fade: float = 1.0) -> np.ndarray:
        img = np.zeros((self.image_size, self.image_size, self.channels))
        if k is not None:
            img[:] = fade * self.bg_scale * PALETTE[k]
        return img

    def subject_patch(self, colors: tuple[int, int], pattern: str) -> np.ndarray:
        s = self.subject_size
        yy, xx = np.mgrid[0:s, 0:s]
        if pattern == "hstripe":
            mask = yy % 2 == 0
        elif pattern == "vstripe":
            mask = xx % 2 == 0
        elif pattern == "checker":
            mask = ((yy // 2) + (xx // 2)) % 2 == 0
        elif pattern == "frame":
            mask = (yy == 0) | (xx == 0) | (yy == s - 1) | (xx == s - 1)
        else:
            raise ValueError(f"unknown pattern {pattern!r}")
        return np.where(mask[..., None], PALETTE[colors[0]], PALETTE[colors[1]])

    def render(self, colors, pattern, quadrant, bg, fade: float = 1.0) -> np.ndarray:
        img = self.background(bg, fade)
        s = self.subject_size
        per_row = self.image_size // s
        r, c = divmod(quadrant, per_row)
        img[r * s : (r + 1) * s, c * s : (c + 1) * s] = self.subject_patch(colors, pattern)
        return img

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "subject_size": self.subject_size,
            "bg_scale": self.bg_scale,
            "pixel_noise": self.pixel_noise,
            "move_prob": self.move_prob,
            "ignore_fade": self.ignore_fade,
        }


@dataclass(frozen=True)
class EncoderSpec:
    """Seeds and shapes of one anchored text/image encoder pair."""

    d: int = 128
    patch: int = 4
    bias_scale: float = 0.05
    text_seed: int = 21
    image_seed: int = 22
    vocab_size: int = 32
    positional: bool = False

    @classmethod
    def for_model(cls, cfg: ModelConfig) -> "EncoderSpec":
        return cls(cfg.d_embed, cfg.patch, 0.05, cfg.text_seed, cfg.image_seed, cfg.vocab_size, True)

    def to_dict(self) -> dict:
        return asdict(self)


def make_encoders(spec: EncoderSpec, world: World) -> tuple[TextEncoder, ImageEncoder]:
    """Toy text/image encoders sharing one embedding space.

    Colour words are anchored to the image embedding of a plain background of
    that colour; all other tokens are seeded random directions.
    """
    if world.vocab_used > spec.vocab_size:
        raise ValueError(f"world needs {world.vocab_used} tokens, vocabulary has {spec.vocab_size}")
    n_pos = (world.image_size // spec.patch) ** 2 if spec.positional else 0
    img_enc = ImageEncoder(spec.patch, world.channels, spec.d, spec.image_seed, spec.bias_scale, "tanh", n_pos)
    anchors = {world.color_token(k): img_enc.pooled(world.background(k)) for k in range(world.n_colors)}
    return TextEncoder(spec.vocab_size, spec.d, spec.text_seed, anchors), img_enc


@dataclass(frozen=True)
class Triplet:
    """One (instruction, reference) query and its pool of generated targets."""

    group: int
    prompt_tokens: tuple[int, ...]
    reference_image: np.ndarray
    target_pool: tuple[tuple[str, np.ndarray], ...]  # (role, image)


def synth_triplets(n: int, world: World, seed: int) -> list[Triplet]:
    """Procedural subjects with a compliant, an identity-broken and an
    instruction-ignoring target each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for g in range(n):
        colors = tuple(int(c) for c in rng.choice(world.n_colors, size=2, replace=False))
        pattern = PATTERNS[rng.integers(len(PATTERNS))]
        quad = int(rng.integers(world.n_quadrants))
        # the broken subject shares no colour with the original, and the
        # requested background shares none with either subject
        others = [k for k in range(world.n_colors) if k not in colors]
        broken = tuple(int(c) for c in rng.choice(others, size=2, replace=False))
        broken_pattern = PATTERNS[rng.integers(len(PATTERNS))]
        bg = int(rng.choice([k for k in others if k not in broken]))
        move = world.move_prob > 0 and rng.random() < world.move_prob
        new_quad = int((quad + 1 + rng.integers(world.n_quadrants - 1)) % world.n_quadrants) if move else quad

        tokens = [world.ON, world.color_token(bg)]
        if move:
            tokens += [world.AT, world.quad_token(new_quad)]
        reference = world.render(colors, pattern, quad, None)
        pool = [
            ("compliant", world.render(colors, pattern, new_quad, bg)),
            ("identity_broken", world.render(broken, broken_pattern, new_quad, bg)),
            ("instruction_ignoring", world.render(colors, pattern, quad, bg, world.ignore_fade)),
        ]
        order = rng.permutation(len(pool))
        pool = [pool[i] for i in order]
        noisy = tuple(
            (role, img + world.pixel_noise * rng.standard_normal(img.shape)) for role, img in pool
        )
        out.append(Triplet(g, tuple(tokens), reference, noisy))
    return out


# ---------------------------------------------------------------- scoring


@dataclass(eq=False)
class Candidate:
    id: int
    image: np.ndarray
    prompt_tokens: tuple[int, ...]
    reference_image: np.ndarray
    group: int = 0
    role: str = ""

    def __eq__(self, other):
        if not isinstance(other, Candidate):
            return NotImplemented
        return (
            self.id == other.id
            and self.group == other.group
            and self.role == other.role
            and tuple(self.prompt_tokens) == tuple(other.prompt_tokens)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.reference_image, other.reference_image)
        )


@dataclass
class ScoredCandidate:
    candidate: Candidate
    s_text: float
    s_visual: float
    q: float
    level: int | None = None

    @property
    def id(self) -> int:
        return self.candidate.id

    @property
    def group(self) -> int:
        return self.candidate.group


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateEmbeddingError(f"{what} embedding has zero norm")
    return v / n


def quality_score(s_text: float, s_visual: float, phi: float) -> float:
    return phi * s_text + (1.0 - phi) * s_visual


def score_candidate(c: Candidate, text_enc, img_enc, phi: float) -> ScoredCandidate:
    """Instruction alignment, subject alignment, and their phi-weighted blend.

    ``img_enc`` maps an image to token embeddings; pooling is the token mean.
    Text alignment is the mean over prompt tokens of the cosine with the
    pooled candidate embedding.
    """
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    text = _unit(np.asarray(text_enc(c.prompt_tokens)), "prompt")
    cand = _unit(np.asarray(img_enc(c.image)).mean(axis=0), "candidate")
    ref = _unit(np.asarray(img_enc(c.reference_image)).mean(axis=0), "reference")
    s_text = float(np.mean(text @ cand))
    s_visual = float(cand @ ref)
    return ScoredCandidate(c, s_text, s_visual, quality_score(s_text, s_visual, phi))


def rank_levels(scored: list[ScoredCandidate], K: int = 5) -> list[ScoredCandidate]:
    """Sort by descending score (ties: ascending id) and cut into K buckets of
    ceil(n/K); the first bucket is level K."""
    if not scored:
        raise ValueError("nothing to rank")
    order = sorted(scored, key=lambda s: (-s.q, s.id))
    size = math.ceil(len(order) / K)
    return [replace(s, level=K - i // size) for i, s in enumerate(order)]


def rank_by_group(scored: list[ScoredCandidate], K: int = 5, per_group: bool = True) -> list[ScoredCandidate]:
    if not per_group:
        return rank_levels(scored, K)
    groups: dict[int, list[ScoredCandidate]] = defaultdict(list)
    for s in scored:
        groups[s.group].append(s)
    out = []
    for g in sorted(groups):
        out.extend(rank_levels(groups[g], K))
    return out


@dataclass(frozen=True)
class PreferencePairRecord:
    id: int
    prompt_tokens: tuple[int, ...]
    group: int
    winner_id: int
    loser_id: int


def make_pairs(scored: list[ScoredCandidate], max_per_winner: int, seed: int) -> list[PreferencePairRecord]:
    """Pair every winner (level 4-5) with up to ``max_per_winner`` losers
    (level 1-3) from the same group, sampled without replacement."""
    if max_per_winner < 1:
        raise ValueError("max_per_winner must be >= 1")
    if any(s.level is None for s in scored):
        raise ValueError("candidates must be ranked before pairing")
    winners = [s for s in scored if s.level >= 4]
    losers = [s for s in scored if s.level <= 3]
    if not winners or not losers:
        raise EmptyPoolError(f"{len(winners)} winners and {len(losers)} losers; need at least one of each")
    by_group: dict[int, list[ScoredCandidate]] = defaultdict(list)
    for s in sorted(losers, key=lambda s: s.id):
        by_group[s.group].append(s)
    rng = np.random.default_rng(seed)
    pairs = []
    for w in sorted(winners, key=lambda s: (s.group, -s.level, s.id)):
        pool = by_group.get(w.group, [])
        if not pool:
            continue
        take = min(max_per_winner, len(pool))
        picks = sorted(rng.choice(len(pool), size=take, replace=False))
        for i in picks:
            lose = pool[i]
            if not w.q > lose.q:
                continue
            pairs.append(PreferencePairRecord(len(pairs), tuple(w.candidate.prompt_tokens), w.group, w.id, lose.id))
    return pairs


# ---------------------------------------------------------------- manifest


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(eq=False)
class Manifest:
    config: dict
    candidates: list[ScoredCandidate]
    pairs: list[PreferencePairRecord]
    hash: str = ""

    def __post_init__(self):
        if not self.hash:
            self.hash = config_hash(self.config)
        self._by_id = {c.id: c for c in self.candidates}

    def candidate(self, cid: int) -> ScoredCandidate:
        return self._by_id[cid]

    def check_integrity(self) -> None:
        for p in self.pairs:
            for cid in (p.winner_id, p.loser_id):
                if cid not in self._by_id:
                    raise IntegrityError(f"pair {p.id} references unknown candidate {cid}")
        if config_hash(self.config) != self.hash:
            raise IntegrityError("config hash does not match config block")

    def pair_arrays(self, pairs=None):
        """(pair, prompt_tokens, reference, winner image, loser image) per pair."""
        out = []
        for p in self.pairs if pairs is None else pairs:
            w, l = self._by_id[p.winner_id].candidate, self._by_id[p.loser_id].candidate
            out.append((p, p.prompt_tokens, w.reference_image, w.image, l.image))
        return out

    def level_histogram(self) -> dict[int, int]:
        hist = {k: 0 for k in range(1, int(self.config.get("levels", 5)) + 1)}
        for c in self.candidates:
            hist[c.level] = hist.get(c.level, 0) + 1
        return hist

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        if self.config != other.config or self.hash != other.hash or self.pairs != other.pairs:
            return False
        if len(self.candidates) != len(other.candidates):
            return False
        for a, b in zip(self.candidates, other.candidates):
            if (a.candidate != b.candidate) or (a.s_text, a.s_visual, a.q, a.level) != (
                b.s_text,
                b.s_visual,
                b.q,
                b.level,
            ):
                return False
        return True


def _dump(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(", ", ": "))


def save_manifest(m: Manifest, path) -> None:
    """Write ``path`` (JSON lines) plus image tensors under ``<stem>.tensors/``."""
    m.check_integrity()
    path = Path(path)
    tdir_name = path.stem + ".tensors"
    tdir = path.parent / tdir_name
    tdir.mkdir(parents=True, exist_ok=True)
    lines = [_dump({"record": "config", "schema_version": SCHEMA_VERSION, "config": m.config, "config_hash": m.hash})]
    written_refs: set[int] = set()
    for s in m.candidates:
        c = s.candidate
        img_rel = f"{tdir_name}/cand_{c.id:06d}.ten"
        ref_rel = f"{tdir_name}/ref_{c.group:06d}.ten"
        save_tensor(path.parent / img_rel, c.image)
        if c.group not in written_refs:
            save_tensor(path.parent / ref_rel, c.reference_image)
            written_refs.add(c.group)
        lines.append(
            _dump(
                {
                    "record": "candidate",
                    "id": c.id,
                    "group": c.group,
                    "role": c.role,
                    "prompt_tokens": list(c.prompt_tokens),
                    "image": img_rel,
                    "reference_image": ref_rel,
                    "s_text": s.s_text,
                    "s_visual": s.s_visual,
                    "q": s.q,
                    "level": s.level,
                }
            )
        )
    for p in m.pairs:
        rec = asdict(p)
        rec["prompt_tokens"] = list(p.prompt_tokens)
        rec["reference_image"] = f"{tdir_name}/ref_{p.group:06d}.ten"
        rec["record"] = "pair"
        lines.append(_dump(rec))
    lines.append(_dump({"record": "end", "candidates": len(m.candidates), "pairs": len(m.pairs)}))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


_CANDIDATE_FIELDS = ("id", "group", "role", "prompt_tokens", "image", "reference_image", "s_text", "s_visual", "q", "level")
_PAIR_FIELDS = ("id", "group", "prompt_tokens", "winner_id", "loser_id")


def load_manifest(path) -> Manifest:
    path = Path(path)
    raw = path.read_text()
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    config = chash = None
    candidates, pairs, end_seen = [], [], False
    ref_cache: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines, start=1):
        if end_seen:
            raise ManifestParseError(lineno, "content after end record")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(lineno, f"malformed record ({exc.msg})") from None
        kind = rec.get("record") if isinstance(rec, dict) else None
        if lineno == 1 and kind != "config":
            raise ManifestParseError(lineno, "first record must be the config block")
        try:
            if kind == "config":
                if rec["schema_version"] != SCHEMA_VERSION:
                    raise ManifestParseError(lineno, f"unsupported schema version {rec['schema_version']}")
                config, chash = rec["config"], rec["config_hash"]
            elif kind == "candidate":
                missing = [f for f in _CANDIDATE_FIELDS if f not in rec]
                if missing:
                    raise ManifestParseError(lineno, f"candidate record missing {missing}")
                ref_rel = rec["reference_image"]
                if ref_rel not in ref_cache:
                    ref_cache[ref_rel] = load_tensor(path.parent / ref_rel)
                cand = Candidate(
                    rec["id"],
                    load_tensor(path.parent / rec["image"]),
                    tuple(rec["prompt_tokens"]),
                    ref_cache[ref_rel],
                    rec["group"],
                    rec["role"],
                )
                candidates.append(ScoredCandidate(cand, rec["s_text"], rec["s_visual"], rec["q"], rec["level"]))
            elif kind == "pair":
                missing = [f for f in _PAIR_FIELDS if f not in rec]
                if missing:
                    raise ManifestParseError(lineno, f"pair record missing {missing}")
                pairs.append(
                    PreferencePairRecord(
                        rec["id"], tuple(rec["prompt_tokens"]), rec["group"], rec["winner_id"], rec["loser_id"]
                    )
                )
            elif kind == "end":
                if rec.get("candidates") != len(candidates) or rec.get("pairs") != len(pairs):
                    raise ManifestParseError(lineno, "record counts do not match end record")
                end_seen = True
            else:
                raise ManifestParseError(lineno, f"unknown record type {kind!r}")
        except (OSError, EOFError) as exc:
            raise ManifestParseError(lineno, f"cannot read referenced tensor: {exc}") from None
    if not end_seen:
        raise ManifestParseError(len(lines) + 1, "unexpected end of file (no end record)")
    m = Manifest(config, candidates, pairs, chash)
    m.check_integrity()
    return m


# ---------------------------------------------------------------- pipeline


def build_candidates(triplets: list[Triplet]) -> list[Candidate]:
    out = []
    for tr in triplets:
        for role, img in tr.target_pool:
            out.append(Candidate(len(out), img, tr.prompt_tokens, tr.reference_image, tr.group, role))
    return out


@dataclass
class DatasetConfig:
    n_instances: int = 256
    seed: int = 7
    phi: float = 0.7
    levels: int = 5
    per_group: bool = True
    max_per_winner: int = 1
    world: World = field(default_factory=World)
    scorer: EncoderSpec = field(default_factory=EncoderSpec)

    def to_dict(self) -> dict:
        return {
            "n_instances": self.n_instances,
            "seed": self.seed,
            "phi": self.phi,
            "levels": self.levels,
            "per_group": self.per_group,
            "max_per_winner": self.max_per_winner,
            "world": self.world.to_dict(),
            "scorer": self.scorer.to_dict(),
            "schema_version": SCHEMA_VERSION,
        }


def build_manifest(cfg: DatasetConfig) -> Manifest:
    """synthesise -> score -> rank -> pair."""
    text_enc, img_enc = make_encoders(cfg.scorer, cfg.world)
    triplets = synth_triplets(cfg.n_instances, cfg.world, cfg.seed)
    scored = [score_candidate(c, text_enc, img_enc, cfg.phi) for c in build_candidates(triplets)]
    ranked = rank_by_group(scored, cfg.levels, cfg.per_group)
    ranked.sort(key=lambda s: s.id)
    pairs = make_pairs(ranked, cfg.max_per_winner, cfg.seed)
    return Manifest(cfg.to_dict(), ranked, pairs)
