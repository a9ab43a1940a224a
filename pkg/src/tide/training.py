"""Adapter-only training, checkpoints, evaluation and the fusion-weight sweep.

The backbone is a small text-to-image denoiser that is briefly pretrained on
procedurally rendered scenes (text conditioning only) and then frozen.  All
later optimisation touches the adapter alone.
"""
from __future__ import annotations

import functools
import hashlib
import io
import json
import os
import struct
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import Model, ModelConfig, denoise, freeze_reference, init_adapter, init_denoiser
from .dataset import (
    PATTERNS,
    EncoderSpec,
    Manifest,
    PreferencePairRecord,
    World,
    Candidate,
    make_encoders,
    score_candidate,
)
from .numerics import ParamSet, Tensor, add, mul, read_tensor, sq_norm, sub, value_and_grad, write_tensor
from .preference import DSDConfig, PreferenceBatch, PreferenceSample, dsd_loss, implicit_reward_gap
from .schedule import ConfigError, NoiseSchedule, WeightFn, build_schedule, ddim_sample, dm_loss, forward_diffuse

__all__ = [
    "DivergenceError",
    "SchemaError",
    "BaseConfig",
    "TrainConfig",
    "Checkpoint",
    "EvalReport",
    "warmup_lr",
    "held_out_split",
    "pretrain_base",
    "build_model",
    "pair_samples",
    "init_checkpoint",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "sample",
    "evaluate",
    "interpolate",
    "CHECKPOINT_SCHEMA",
]

CHECKPOINT_SCHEMA = 1
_MAGIC = b"TIDECKPT"


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class BaseConfig:
    """Text-only pretraining of the backbone before it is frozen."""

    steps: int = 3000
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-13
    warmup_steps: int = 50
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    momentum: float = 0.9
    objective: str = "dsd"  # or "dm" for the reconstruction-only baseline
    dsd: DSDConfig = field(default_factory=DSDConfig)
    gamma_train: float = 1.0
    schedule_kind: str = "linear"
    beta_start: float = 1e-3
    beta_end: float = 0.2
    holdout_frac: float = 0.1
    eval_draws: int = 64

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.objective not in ("dsd", "dm"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.gamma_train < 0:
            raise ConfigError("gamma_train must be non-negative")
        if not 0 <= self.holdout_frac < 1:
            raise ConfigError("holdout_frac must lie in [0, 1)")
        if self.dsd.T != self.T:
            raise ConfigError("objective T and schedule T differ")

    @property
    def T(self) -> int:
        return self.dsd.T

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule_kind, self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dsd"] = self.dsd.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        dsd = d.pop("dsd", None)
        if dsd is not None:
            om = dsd.get("omega", {})
            d["dsd"] = DSDConfig(dsd["beta"], dsd["T"], WeightFn(om.get("kind", "constant"), om.get("value", 1.0)))
        return cls(**d)


def warmup_lr(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def _unit_hash(*parts) -> float:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2.0**64


def held_out_split(
    pairs: Iterable[PreferencePairRecord], seed: int, frac: float = 0.1
) -> tuple[list[PreferencePairRecord], list[PreferencePairRecord]]:
    """(train, held_out) by a seeded hash of each pair id."""
    train, held = [], []
    for p in pairs:
        (held if _unit_hash("holdout", seed, p.id) < frac else train).append(p)
    return train, held


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------- backbone


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, p: ParamSet, g: dict) -> ParamSet:
        self.t += 1
        upd = {}
        for k, gk in g.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * gk
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * gk * gk
            mh, vh = m / (1 - self.b1**self.t), v / (1 - self.b2**self.t)
            upd[k] = p[k].data - self.lr * mh / (np.sqrt(vh) + self.eps)
        return p.replace(upd)


def _random_scene(world: World, rng: np.random.Generator):
    colors = tuple(int(c) for c in rng.choice(world.n_colors, size=2, replace=False))
    pattern = PATTERNS[rng.integers(len(PATTERNS))]
    quad = int(rng.integers(world.n_quadrants))
    bg = int(rng.choice([k for k in range(world.n_colors) if k not in colors]))
    img = world.render(colors, pattern, quad, bg) + world.pixel_noise * rng.standard_normal(world_shape(world))
    return img, (world.ON, world.color_token(bg))


def world_shape(world: World) -> tuple[int, int, int]:
    return (world.image_size, world.image_size, world.channels)


def pretrain_base(
    mcfg: ModelConfig, world: World, bcfg: BaseConfig, s: NoiseSchedule, log: Callable | None = None
) -> ParamSet:
    """Fit the backbone to text-conditioned random scenes; returns it frozen."""
    text_enc, _ = make_encoders(EncoderSpec.for_model(mcfg), world)
    p = ParamSet(init_denoiser(mcfg).arrays())
    opt = _Adam(bcfg.lr)
    rng = np.random.default_rng(bcfg.seed)
    dim = float(np.prod(mcfg.image_shape))
    for step in range(1, bcfg.steps + 1):
        batch = [_random_scene(world, rng) for _ in range(bcfg.batch_size)]
        ts = rng.integers(1, s.T + 1, size=len(batch))
        noise = rng.standard_normal((len(batch),) + mcfg.image_shape)

        def loss(q):
            acc = None
            for (x0, tokens), t, e in zip(batch, ts, noise):
                xt = forward_diffuse(x0, int(t), e, s)
                term = sq_norm(sub(e, denoise(xt, text_enc(tokens), None, int(t), q, None, 0.0, mcfg)))
                acc = term if acc is None else add(acc, term)
            return mul(acc, 1.0 / (len(batch) * dim))

        value, g = value_and_grad(loss, p)
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        p = opt.step(p, g)
        if log is not None:
            log(step, value)
    return p.frozen_copy()


@functools.lru_cache(maxsize=4)
def _cached_base(mcfg: ModelConfig, world: World, bcfg: BaseConfig, sched: tuple) -> ParamSet:
    return pretrain_base(mcfg, world, bcfg, build_schedule(*sched))


def build_model(
    mcfg: ModelConfig, world: World, bcfg: BaseConfig | None, s: NoiseSchedule, base: ParamSet | None = None
) -> Model:
    """Backbone (pretrained unless ``bcfg`` is None or ``base`` given) plus the model's encoders."""
    text_enc, img_enc = make_encoders(EncoderSpec.for_model(mcfg), world)
    if base is None:
        if bcfg is None or bcfg.steps == 0:
            base = init_denoiser(mcfg)
        else:
            base = _cached_base(mcfg, world, bcfg, (s.kind, s.T, s.beta_start, s.beta_end))
    meta = {"model": mcfg.to_dict(), "world": world.to_dict(), "base": bcfg.to_dict() if bcfg else None}
    return Model(mcfg, base, text_enc, img_enc, meta)


def pair_samples(manifest: Manifest, model: Model, pairs=None) -> list[PreferenceSample]:
    out = []
    for _, tokens, ref, win, lose in manifest.pair_arrays(pairs):
        out.append(PreferenceSample(model.text_encoder(tokens), model.image_encoder(ref), win, lose))
    return out


# ---------------------------------------------------------------- checkpoints


@dataclass(eq=False)
class Checkpoint:
    adapter: ParamSet
    velocity: dict[str, np.ndarray]
    step: int
    config: TrainConfig
    model: Model
    manifest_hash: str = ""
    losses: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def reference(self) -> ParamSet:
        """The frozen snapshot the adapter is compared against (its initial state)."""
        return freeze_reference(init_adapter(self.model.cfg))

    @property
    def schedule(self) -> NoiseSchedule:
        return self.config.schedule()

    def header(self) -> dict:
        body = {
            "train": self.config.to_dict(),
            "model": self.model.cfg.to_dict(),
            "world": self.model.meta.get("world"),
            "base": self.model.meta.get("base"),
            "schedule": self.schedule.to_dict(),
            "encoders": EncoderSpec.for_model(self.model.cfg).to_dict(),
            "manifest_hash": self.manifest_hash,
        }
        return {"schema_version": CHECKPOINT_SCHEMA, "config_hash": _hash(body), "step": self.step, **body}


def _initial_adapter(model: Model) -> ParamSet:
    return init_adapter(model.cfg, zero_values=True)


def init_checkpoint(cfg: TrainConfig, model: Model, manifest_hash: str = "") -> Checkpoint:
    ap = _initial_adapter(model)
    return Checkpoint(ap, {k: np.zeros_like(v) for k, v in ap.arrays().items()}, 0, cfg, model, manifest_hash)


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Header line (JSON) followed by named ``.ten`` blocks."""
    path = Path(path)
    header = ck.header()
    blocks = [("adapter/" + k, v) for k, v in ck.adapter.arrays().items()]
    blocks += [("velocity/" + k, v) for k, v in ck.velocity.items()]
    blocks += [("base/" + k, v) for k, v in ck.model.denoiser.arrays().items()]
    if ck.losses:
        blocks.append(("losses", np.asarray(ck.losses, dtype=np.float64)))
    header["blocks"] = [name for name, _ in blocks]
    buf = io.BytesIO()
    buf.write(_MAGIC + b" " + json.dumps(header, sort_keys=True).encode() + b"\n")
    for name, arr in blocks:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        write_tensor(buf, arr)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if not data.startswith(_MAGIC + b" ") or nl < 0:
        raise SchemaError(f"{path}: not a checkpoint file")
    try:
        header = json.loads(data[len(_MAGIC) + 1 : nl])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: unreadable header ({exc})") from None
    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise SchemaError(f"{path}: schema version {header.get('schema_version')}, expected {CHECKPOINT_SCHEMA}")
    body = {k: header[k] for k in ("train", "model", "world", "base", "schedule", "encoders", "manifest_hash")}
    if _hash(body) != header.get("config_hash"):
        raise SchemaError(f"{path}: config hash mismatch")
    fh = io.BytesIO(data[nl + 1 :])
    tensors = {}
    for name in header["blocks"]:
        (n,) = struct.unpack("<I", fh.read(4))
        got = fh.read(n).decode()
        if got != name:
            raise SchemaError(f"{path}: expected block {name!r}, found {got!r}")
        tensors[name] = read_tensor(fh)
    cfg = TrainConfig.from_dict(header["train"])
    mcfg = ModelConfig(**header["model"])
    world = World(**header["world"])
    base_cfg = BaseConfig(**header["base"]) if header["base"] else None
    base = ParamSet(
        {k[5:]: v for k, v in tensors.items() if k.startswith("base/")},
        frozen=[k[5:] for k in tensors if k.startswith("base/")],
    )
    model = build_model(mcfg, world, base_cfg, cfg.schedule(), base=base)
    adapter = ParamSet({k[8:]: v for k, v in tensors.items() if k.startswith("adapter/")})
    velocity = {k[9:]: v.copy() for k, v in tensors.items() if k.startswith("velocity/")}
    losses = [(int(r[0]), float(r[1]), float(r[2])) for r in tensors.get("losses", np.zeros((0, 3)))]
    return Checkpoint(adapter, velocity, int(header["step"]), cfg, model, header["manifest_hash"], losses)


# ---------------------------------------------------------------- training


def _batches(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _dm_batch_loss(samples, model: Model, p: ParamSet, s: NoiseSchedule, cfg: TrainConfig, seed: int) -> Tensor:
    """Reconstruction loss on the winning targets only, same noise policy as the preference loss."""
    rng = np.random.default_rng(seed)
    w = cfg.dsd.omega
    acc = None
    for smp in samples:
        t = int(rng.integers(1, cfg.T + 1))
        eps = rng.standard_normal(np.shape(smp.y0_w))
        pred = model.predict(forward_diffuse(smp.y0_w, t, eps, s), smp.c_p, smp.img_emb, t, p, cfg.gamma_train)
        term = dm_loss(eps, pred, t, w, s)
        acc = term if acc is None else add(acc, term)
    return mul(acc, 1.0 / len(samples))


def train(
    cfg: TrainConfig,
    manifest: Manifest,
    model: Model,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    log: Callable[[int, float, float], None] | None = None,
) -> Checkpoint:
    """SGD with momentum on the adapter only; ``max_steps`` stops early (for resumption tests)."""
    train_pairs, _ = held_out_split(manifest.pairs, cfg.seed, cfg.holdout_frac)
    if not train_pairs:
        raise ConfigError("no training pairs")
    samples = pair_samples(manifest, model, train_pairs)
    s = cfg.schedule()
    ck = resume if resume is not None else init_checkpoint(cfg, model, manifest.hash)
    if resume is not None and resume.config != cfg:
        raise ConfigError("resume checkpoint was written with a different configuration")
    ref = ck.reference
    ap, vel, step = ck.adapter, {k: v.copy() for k, v in ck.velocity.items()}, ck.step
    losses = list(ck.losses)
    per_epoch = len(_batches(len(samples), cfg, 0))
    total = cfg.epochs * per_epoch
    stop = total if max_steps is None else min(total, max_steps)
    while step < stop:
        epoch, k = divmod(step, per_epoch)
        idx = _batches(len(samples), cfg, epoch)[k]
        chunk = [samples[i] for i in idx]
        seed = (cfg.seed * 1_000_003 + step) % 2**63
        if cfg.objective == "dsd":
            batch = PreferenceBatch(tuple(chunk))
            loss_fn = lambda p: dsd_loss(batch, model, p, ref, s, cfg.dsd, seed, cfg.gamma_train)  # noqa: E731
        else:
            loss_fn = lambda p: _dm_batch_loss(chunk, model, p, s, cfg, seed)  # noqa: E731
        value, g = value_and_grad(loss_fn, ap)
        step += 1
        if not np.isfinite(value) or not all(np.all(np.isfinite(v)) for v in g.values()):
            raise DivergenceError(step, value)
        lr = warmup_lr(step, cfg)
        upd = {}
        for name, gk in g.items():
            vel[name] = cfg.momentum * vel[name] + gk
            upd[name] = ap[name].data - lr * vel[name]
        ap = ap.replace(upd)
        losses.append((step, lr, value))
        if log is not None:
            log(step, lr, value)
    return Checkpoint(ap, vel, step, cfg, model, manifest.hash, losses)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalReport:
    text_align: float
    subject_align: float
    pref_accuracy: float
    n_pairs: int

    def __post_init__(self):
        for k in ("text_align", "subject_align", "pref_accuracy"):
            if not np.isfinite(getattr(self, k)):
                raise ValueError(f"{k} is not finite")
        if not 0.0 <= self.pref_accuracy <= 1.0:
            raise ValueError("pref_accuracy outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_lines(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def sample(model: Model, adapter: ParamSet | None, tokens, reference, gamma: float, s: NoiseSchedule, seed: int):
    """One deterministic DDIM sample for an instruction and reference image."""
    c_p = model.text_encoder(tokens)
    emb = model.image_encoder(reference) if reference is not None else None
    return ddim_sample(lambda x, t: model.eps(x, c_p, emb, t, adapter, gamma), model.cfg.image_shape, s, seed)


def _accuracy(gaps: list[float]) -> float:
    return float(np.mean([1.0 if g > 0 else 0.5 if g == 0 else 0.0 for g in gaps]))


def evaluate(
    ck: Checkpoint,
    manifest: Manifest,
    pairs=None,
    scorer: EncoderSpec | None = None,
    n_draws: int | None = None,
    seed: int = 0,
    gamma: float | None = None,
) -> EvalReport:
    """Sample-based alignment scores and implicit-reward preference accuracy.

    ``pairs`` defaults to the held-out split.  Alignment is measured with the
    dataset's scoring encoders on one DDIM sample per instruction group.
    """
    cfg, model = ck.config, ck.model
    if pairs is None:
        pairs = held_out_split(manifest.pairs, cfg.seed, cfg.holdout_frac)[1]
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    gamma = cfg.gamma_train if gamma is None else gamma
    n_draws = cfg.eval_draws if n_draws is None else n_draws
    s = cfg.schedule()
    ref = ck.reference
    world = World(**model.meta["world"])
    spec = scorer or EncoderSpec(**manifest.config.get("scorer", {}))
    text_enc, img_enc = make_encoders(spec, world)
    phi = float(manifest.config.get("phi", 0.7))

    gaps = []
    for smp, p in zip(pair_samples(manifest, model, pairs), pairs):
        gaps.append(implicit_reward_gap(model, ck.adapter, ref, smp, s, cfg.dsd, n_draws, seed + p.id, gamma))

    s_text, s_vis = [], []
    done = set()
    for p in pairs:
        if p.group in done:
            continue
        done.add(p.group)
        win = manifest.candidate(p.winner_id).candidate
        img = sample(model, ck.adapter, p.prompt_tokens, win.reference_image, gamma, s, seed + p.group)
        sc = score_candidate(Candidate(-1, img, p.prompt_tokens, win.reference_image), text_enc, img_enc, phi)
        s_text.append(sc.s_text)
        s_vis.append(sc.s_visual)
    return EvalReport(float(np.mean(s_text)), float(np.mean(s_vis)), _accuracy(gaps), len(pairs))


def interpolate(ck: Checkpoint, tokens, reference, gammas, seed: int) -> list[tuple[float, np.ndarray]]:
    """One sample per fusion weight, same seed throughout, ordered by weight."""
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("need at least one gamma")
    if any(g < 0 for g in gammas):
        raise ValueError("gamma must be non-negative")
    s = ck.schedule
    return [(g, sample(ck.model, ck.adapter, tokens, reference, g, s, seed)) for g in sorted(gammas)]
