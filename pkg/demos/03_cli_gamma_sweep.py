"""Drive the command line end to end and sweep the image-conditioning weight.

build-dataset -> train -> interpolate -> eval, all in a temporary directory
with a small config. gamma = 0 is the text-only model; gamma = 1 gives the
reference image full weight. The sweep uses one seed so rows are comparable.
The image value projections start at zero, so after a short run the samples
only drift slightly away from the text-only one.
"""
import tempfile
from pathlib import Path

import numpy as np

from tide import cli
from tide.numerics import load_tensor

CONFIG = """\
dataset.n_instances = 24
model.hidden = 16
model.d_embed = 16
model.d_attn = 8
model.ipm_hidden = 16
base.steps = 300
train.dsd.beta = 50.0
train.dsd.T = 20
train.lr = 1e-9
train.warmup_steps = 10
train.epochs = 3
train.holdout_frac = 0.2
eval.n_draws = 16
"""

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    (root / "demo.cfg").write_text(CONFIG)
    common = ["--config", str(root / "demo.cfg")]
    manifest = str(root / "data" / "manifest.jsonl")
    ckpt = str(root / "run" / "checkpoint.ckpt")

    assert cli.main(["build-dataset", *common, "--out", str(root / "data")]) == 0
    assert cli.main(["train", *common, "--manifest", manifest, "--out", str(root / "run")]) == 0
    assert cli.main(["interpolate", *common, "--manifest", manifest, "--checkpoint", ckpt, "--out", str(root / "sweep")]) == 0
    assert cli.main(["eval", *common, "--manifest", manifest, "--checkpoint", ckpt, "--out", str(root / "eval")]) == 0

    # how far each sample moves away from the text-only one as gamma grows
    rows = [line.split("\t") for line in (root / "sweep" / "interpolation.tsv").read_text().splitlines()]
    base = load_tensor(root / "sweep" / rows[0][1])
    print("\ngamma  mean |x - x(gamma=0)|")
    for gamma, name in rows:
        drift = np.abs(load_tensor(root / "sweep" / name) - base).mean()
        print(f"{float(gamma):5.1f}  {drift:.2e}")
