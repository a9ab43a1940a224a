"""Train the adapter with the dual-branch preference loss on a toy-sized model.

The frozen backbone is pretrained briefly, the adapter starts as a copy of the
reference, and held-out preference accuracy is measured before and after.
Everything is scaled down so this finishes in well under a minute.
"""
import math
import time

from tide.conditioning import ModelConfig
from tide.dataset import DatasetConfig, World, build_manifest
from tide.preference import DSDConfig
from tide.training import BaseConfig, TrainConfig, build_model, evaluate, init_checkpoint, train

manifest = build_manifest(DatasetConfig(n_instances=40, seed=1))
mcfg = ModelConfig(hidden=16, mlp_ratio=2, n_res=1, n_attn=2, d_embed=16, d_attn=8, ipm_hidden=16)
cfg = TrainConfig(lr=1e-9, warmup_steps=10, epochs=5, dsd=DSDConfig(beta=50.0, T=20), holdout_frac=0.2, eval_draws=16)

t0 = time.time()
model = build_model(mcfg, World(**manifest.config["world"]), BaseConfig(steps=300), cfg.schedule())
print(f"backbone ready in {time.time() - t0:.1f}s")

before = evaluate(init_checkpoint(cfg, model), manifest)
ck = train(cfg, manifest, model, log=lambda step, lr, loss: step % 10 == 0 and print(f"step {step:3d} lr {lr:.1e} loss {loss:.4f}"))
after = evaluate(ck, manifest)

print(f"ln 2 = {math.log(2):.4f}")
print("before:", before.to_lines().replace("\n", "  "))
print("after: ", after.to_lines().replace("\n", "  "))
