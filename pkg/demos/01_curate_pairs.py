"""Build a small preference dataset and look at what the curation step kept.

Each query yields three candidates: a compliant edit, one that ignores the
instruction, and one that loses the subject. They are scored with
q = phi * s_text + (1 - phi) * s_visual, ranked within their query group and
paired winner against loser.
"""
from collections import Counter

from tide.dataset import DatasetConfig, build_manifest

m = build_manifest(DatasetConfig(n_instances=20, seed=0))
print(f"{len(m.candidates)} candidates, {len(m.pairs)} pairs")
print("levels:", m.level_histogram())

for p in m.pairs[:6]:
    w, lo = m.candidate(p.winner_id), m.candidate(p.loser_id)
    print(
        f"group {p.group:2d}  {w.candidate.role:>20s} q={w.q:+.3f}"
        f"  beats  {lo.candidate.role:<20s} q={lo.q:+.3f}"
    )

print("winner roles:", dict(Counter(m.candidate(p.winner_id).candidate.role for p in m.pairs)))
print("loser roles: ", dict(Counter(m.candidate(p.loser_id).candidate.role for p in m.pairs)))
