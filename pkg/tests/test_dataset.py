import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tide.dataset import (
    Candidate,
    DatasetConfig,
    DegenerateEmbeddingError,
    EmptyPoolError,
    EncoderSpec,
    IntegrityError,
    Manifest,
    ManifestParseError,
    PreferencePairRecord,
    ScoredCandidate,
    World,
    build_candidates,
    build_manifest,
    load_manifest,
    make_encoders,
    make_pairs,
    quality_score,
    rank_by_group,
    rank_levels,
    save_manifest,
    score_candidate,
    synth_triplets,
)

DUMMY = np.zeros((1, 1, 1))


def scored(qs, groups=None):
    groups = groups or [0] * len(qs)
    return [ScoredCandidate(Candidate(i, DUMMY, (0,), DUMMY, g), 0.0, 0.0, float(q)) for i, (q, g) in enumerate(zip(qs, groups))]


class ConstEnc:
    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=float)

    def __call__(self, x):
        return self.rows


class TestScore:
    def test_all_equal_embeddings(self):
        enc = ConstEnc([[0.6, 0.8]])
        for phi in (0.0, 0.3, 1.0):
            sc = score_candidate(Candidate(0, DUMMY, (1, 2), DUMMY), enc, enc, phi)
            assert (sc.s_text, sc.s_visual) == pytest.approx((1.0, 1.0))
            assert sc.q == pytest.approx(1.0)

    def test_weighting_value(self):
        assert quality_score(1.0, 0.0, 0.7) == pytest.approx(0.7, abs=1e-15)

    def test_orthogonal_prompt(self):
        sc = score_candidate(Candidate(0, DUMMY, (1,), DUMMY), ConstEnc([[1.0, 0.0]]), ConstEnc([[0.0, 2.0]]), 0.7)
        assert sc.s_text == 0.0 and sc.s_visual == pytest.approx(1.0)
        assert sc.q == pytest.approx(0.3)

    def test_text_alignment_is_token_mean(self):
        text = ConstEnc([[1.0, 0.0], [0.0, 1.0]])
        img = ConstEnc([[1.0, 0.0], [1.0, 0.0]])
        sc = score_candidate(Candidate(0, DUMMY, (1, 2), DUMMY), text, img, 0.5)
        assert sc.s_text == pytest.approx(0.5)

    def test_degenerate(self):
        with pytest.raises(DegenerateEmbeddingError):
            score_candidate(Candidate(0, DUMMY, (1,), DUMMY), ConstEnc([[1.0, 0.0]]), ConstEnc([[0.0, 0.0]]), 0.7)

    def test_phi_range(self):
        with pytest.raises(ValueError):
            score_candidate(Candidate(0, DUMMY, (1,), DUMMY), ConstEnc([[1.0]]), ConstEnc([[1.0]]), 1.5)

    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 0.99), st.floats(1e-6, 0.5))
    def test_strictly_increasing(self, a, b, phi, d):
        assert quality_score(a + d, b, phi) > quality_score(a, b, phi)
        assert quality_score(a, b + d, phi) > quality_score(a, b, phi)


class TestRank:
    def test_ten_distinct(self):
        out = rank_levels(scored(np.arange(10) / 10))
        levels = {s.id: s.level for s in out}
        assert [levels[9], levels[8]] == [5, 5]
        assert sorted(levels.values()) == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]

    def test_ceiling_split(self):
        assert [s.level for s in rank_levels(scored([0.1, 0.5, 0.3]))] == [5, 4, 3]

    def test_ties_by_id(self):
        out = rank_levels(scored([0.4] * 7))
        assert [s.id for s in out] == list(range(7))
        assert [s.level for s in out] == [5, 5, 4, 4, 3, 3, 2]

    def test_empty(self):
        with pytest.raises(ValueError):
            rank_levels([])

    @given(st.lists(st.integers(0, 20), min_size=1, max_size=1000), st.integers(1, 7))
    def test_matches_sort_oracle(self, raw, K):
        qs = np.array(raw) / 20.0
        out = rank_levels(scored(qs), K)
        oracle = sorted(range(len(qs)), key=lambda i: (-qs[i], i))
        assert [s.id for s in out] == oracle
        size = math.ceil(len(qs) / K)
        assert [s.level for s in out] == [K - i // size for i in range(len(qs))]

    def test_per_group(self):
        out = rank_by_group(scored([0.9, 0.1, 0.5, 0.2, 0.8, 0.3], [0, 0, 0, 1, 1, 1]))
        lv = {s.id: s.level for s in out}
        assert (lv[0], lv[2], lv[1]) == (5, 4, 3)
        assert (lv[4], lv[5], lv[3]) == (5, 4, 3)


class TestPairs:
    def pool(self):
        return rank_levels(scored([0.9, 0.8, 0.3, 0.2, 0.1]))

    def test_full_cartesian(self):
        assert len(make_pairs(self.pool(), 3, 0)) == 6

    def test_capped(self):
        pairs = make_pairs(self.pool(), 1, 0)
        assert len(pairs) == 2
        assert {p.winner_id for p in pairs} == {0, 1}

    def test_discards_ties(self):
        out = rank_levels(scored([0.5] * 5))
        assert make_pairs(out, 3, 0) == []

    def test_empty_pool(self):
        with pytest.raises(EmptyPoolError):
            make_pairs(rank_levels(scored([0.5])), 1, 0)

    def test_unranked(self):
        with pytest.raises(ValueError):
            make_pairs(scored([0.1, 0.2]), 1, 0)

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=60), st.integers(1, 4), st.integers(0, 99))
    def test_constraints(self, qs, cap, seed):
        ranked = rank_levels(scored(qs))
        if not any(s.level <= 3 for s in ranked):
            return
        by_id = {s.id: s for s in ranked}
        pairs = make_pairs(ranked, cap, seed)
        for p in pairs:
            w, lo = by_id[p.winner_id], by_id[p.loser_id]
            assert w.level in (4, 5) and lo.level in (1, 2, 3) and w.q > lo.q
        assert pairs == make_pairs(ranked, cap, seed)


@pytest.fixture(scope="module")
def world_stats():
    world = World()
    te, ie = make_encoders(EncoderSpec(), world)
    stats = []
    for tr in synth_triplets(300, world, 3):
        sc = {role: score_candidate(Candidate(0, img, tr.prompt_tokens, tr.reference_image), te, ie, 0.7) for role, img in tr.target_pool}
        stats.append(sc)
    return stats


class TestSynth:
    def test_deterministic(self):
        a, b = synth_triplets(5, World(), 1), synth_triplets(5, World(), 1)
        for x, y in zip(a, b):
            assert x.prompt_tokens == y.prompt_tokens
            assert np.array_equal(x.reference_image, y.reference_image)
            assert all(r1 == r2 and np.array_equal(i1, i2) for (r1, i1), (r2, i2) in zip(x.target_pool, y.target_pool))

    def test_pool_roles(self):
        for tr in synth_triplets(10, World(), 2):
            assert sorted(r for r, _ in tr.target_pool) == ["compliant", "identity_broken", "instruction_ignoring"]

    def test_n(self):
        with pytest.raises(ValueError):
            synth_triplets(0, World(), 0)

    def test_compliant_wins(self, world_stats):
        frac = np.mean([s["compliant"].q > max(s["identity_broken"].q, s["instruction_ignoring"].q) for s in world_stats])
        assert frac >= 0.95

    def test_contrast(self, world_stats):
        ok = [
            s["instruction_ignoring"].s_visual > s["identity_broken"].s_visual
            and s["instruction_ignoring"].s_text < s["identity_broken"].s_text
            for s in world_stats
        ]
        assert np.mean(ok) >= 0.95


@pytest.fixture(scope="module")
def small_manifest():
    return build_manifest(DatasetConfig(n_instances=12, seed=5))


class TestManifest:
    def test_pair_ratio(self):
        m = build_manifest(DatasetConfig(n_instances=400, seed=1))
        assert len(m.candidates) == 1200
        # two winners and one loser per query, so at most 2/3 pairs per candidate
        ratio = len(m.pairs) / len(m.candidates)
        assert 0.6 <= ratio <= 2 / 3

    def test_histogram(self, small_manifest):
        h = small_manifest.level_histogram()
        assert sum(h.values()) == len(small_manifest.candidates)
        assert h == {1: 0, 2: 0, 3: 12, 4: 12, 5: 12}

    def test_byte_deterministic(self, tmp_path):
        paths = []
        for k in range(2):
            p = tmp_path / f"m{k}" / "manifest.jsonl"
            p.parent.mkdir()
            save_manifest(build_manifest(DatasetConfig(n_instances=6, seed=5)), p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        for f in (paths[0].parent / "manifest.tensors").iterdir():
            assert f.read_bytes() == (paths[1].parent / "manifest.tensors" / f.name).read_bytes()

    def test_roundtrip(self, tmp_path, small_manifest):
        p = tmp_path / "m.jsonl"
        save_manifest(small_manifest, p)
        assert load_manifest(p) == small_manifest

    def test_three_record_roundtrip(self, tmp_path):
        c = [ScoredCandidate(Candidate(i, np.full((2, 2, 1), i), (1, 3), np.ones((2, 2, 1))), 0.1 * i, 0.2, 0.3 * i, 5 - i) for i in range(2)]
        m = Manifest({"levels": 5}, c, [PreferencePairRecord(0, (1, 3), 0, 0, 1)])
        p = tmp_path / "m.jsonl"
        save_manifest(m, p)
        assert load_manifest(p) == m

    def test_truncated(self, tmp_path, small_manifest):
        p = tmp_path / "m.jsonl"
        save_manifest(small_manifest, p)
        text = p.read_text()
        p.write_text(text[: len(text) // 2])
        with pytest.raises(ManifestParseError) as exc:
            load_manifest(p)
        assert exc.value.line == text[: len(text) // 2].count("\n") + 1

    def test_dangling(self, tmp_path, small_manifest):
        p = tmp_path / "m.jsonl"
        save_manifest(small_manifest, p)
        lines = p.read_text().splitlines()
        for i, line in enumerate(lines):
            rec = json.loads(line)
            if rec["record"] == "pair":
                rec["winner_id"] = 10_000
                lines[i] = json.dumps(rec)
                break
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(IntegrityError):
            load_manifest(p)

    def test_recount_pairs(self, tmp_path, small_manifest):
        p = tmp_path / "m.jsonl"
        save_manifest(small_manifest, p)
        recs = [json.loads(x) for x in p.read_text().splitlines()]
        assert sum(r["record"] == "pair" for r in recs) == len(small_manifest.pairs)

    def test_pair_constraints(self, small_manifest):
        for p in small_manifest.pairs:
            w, lo = small_manifest.candidate(p.winner_id), small_manifest.candidate(p.loser_id)
            assert w.level >= 4 and lo.level <= 3 and w.q > lo.q and w.group == lo.group == p.group

    def test_build_candidates_ids(self):
        cands = build_candidates(synth_triplets(3, World(), 0))
        assert [c.id for c in cands] == list(range(9))
