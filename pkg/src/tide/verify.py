"""Self-checks behind ``tide verify``: one gradient check per differentiable
primitive, gradient checks of both training losses on a miniature model, and
the exact identities the rest of the package relies on."""
from __future__ import annotations

import contextlib
import math
import tempfile
from pathlib import Path

import numpy as np

from . import numerics as nx
from .conditioning import Model, ModelConfig, fuse, init_adapter, init_denoiser
from .dataset import (
    DatasetConfig,
    EncoderSpec,
    ScoredCandidate,
    Candidate,
    World,
    build_manifest,
    load_manifest,
    make_encoders,
    rank_levels,
    save_manifest,
)
from .preference import DSDConfig, PreferenceBatch, PreferenceSample, dsd_loss
from .schedule import WeightFn, build_schedule, ddim_step, dm_loss, forward_diffuse

_IDX = np.arange(0, 12, 4)


def _primitive_cases() -> dict:
    """A scalar function per primitive that depends on that primitive's gradient
    plus (at most) ``sum`` and ``gather``."""
    T = nx.total
    return {
        "add": lambda p: T(nx.add(p["a"], p["b"])),
        "sub": lambda p: T(nx.sub(p["a"], p["b"])),
        "mul": lambda p: T(nx.mul(p["a"], p["b"])),
        "neg": lambda p: T(nx.neg(p["a"])),
        "matmul": lambda p: T(nx.matmul(p["a"], p["c"])),
        "transpose": lambda p: T(nx.gather(nx.transpose(p["a"]), _IDX, (3,))),
        "sum": lambda p: T(p["a"]),
        "square": lambda p: T(nx.square(p["a"])),
        "exp": lambda p: T(nx.exp(p["a"])),
        "tanh": lambda p: T(nx.tanh(p["a"])),
        "gelu": lambda p: T(nx.gelu(p["a"])),
        "softplus": lambda p: T(nx.softplus(p["a"])),
        "softmax_rows": lambda p: T(nx.gather(nx.softmax_rows(p["a"]), _IDX, (3,))),
        "reshape": lambda p: T(nx.gather(nx.reshape(p["a"], (4, 3)), _IDX, (3,))),
        "gather": lambda p: T(nx.gather(p["a"], np.array([0, 0, 5, 7]), (4,))),
    }


def _leaf_params(seed: int) -> nx.ParamSet:
    rng = np.random.default_rng(seed)
    return nx.ParamSet(
        {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4)), "c": rng.standard_normal((4, 2))}
    )


def _tiny_model() -> tuple[Model, World]:
    cfg = ModelConfig(hidden=8, mlp_ratio=2, n_res=1, n_attn=2, d_embed=6, d_attn=5, ipm_hidden=7)
    world = World()
    te, ie = make_encoders(EncoderSpec.for_model(cfg), world)
    return Model(cfg, init_denoiser(cfg), te, ie), world


def _random_adapter(cfg: ModelConfig, seed: int, scale: float = 0.3) -> nx.ParamSet:
    """Adapter at a generic (non-zero) point so every parameter has a live gradient."""
    base = init_adapter(cfg, zero_values=False)
    rng = np.random.default_rng(seed)
    return base.replace({k: v.data + scale * rng.standard_normal(v.shape) for k, v in base.items()})


def _tiny_sample(model: Model, world: World, seed: int) -> PreferenceSample:
    rng = np.random.default_rng(seed)
    shape = model.cfg.image_shape
    return PreferenceSample(
        model.text_encoder([world.ON, world.color_token(int(rng.integers(8)))]),
        model.image_encoder(rng.standard_normal(shape) * 0.5),
        rng.standard_normal(shape) * 0.5,
        rng.standard_normal(shape) * 0.5,
    )


def check_primitive_grads() -> list[tuple[str, bool, str]]:
    out = []
    for name, f in _primitive_cases().items():
        rep = nx.finite_diff_check(f, _leaf_params(1), eps=1e-6, tol=1e-6)
        out.append((f"grad[{name}]", rep.passed, f"max rel err {rep.max_rel_err:.2e}"))
    return out


def check_loss_grads(seeds=(0, 1)) -> list[tuple[str, bool, str]]:
    model, world = _tiny_model()
    s = build_schedule("linear", 10, 1e-3, 0.2)
    dcfg = DSDConfig(beta=0.05, T=10)
    ref = _random_adapter(model.cfg, 99).frozen_copy()
    worst_dm, worst_dsd = 0.0, 0.0
    for seed in seeds:
        theta = _random_adapter(model.cfg, seed)
        smp = _tiny_sample(model, world, seed)
        rng = np.random.default_rng(seed)
        t = int(rng.integers(1, s.T + 1))
        eps = rng.standard_normal(model.cfg.image_shape)
        xt = forward_diffuse(smp.y0_w, t, eps, s)

        def f_dm(p):
            return dm_loss(eps, model.predict(xt, smp.c_p, smp.img_emb, t, p, 1.0), t, WeightFn(), s)

        batch = PreferenceBatch((smp,))
        rep_dm = nx.finite_diff_check(f_dm, theta)
        rep_dsd = nx.finite_diff_check(lambda p: dsd_loss(batch, model, p, ref, s, dcfg, seed), theta)
        worst_dm, worst_dsd = max(worst_dm, rep_dm.max_rel_err), max(worst_dsd, rep_dsd.max_rel_err)
    return [
        ("grad[dm_loss]", worst_dm <= 1e-4, f"max rel err {worst_dm:.2e} over {len(seeds)} seeds"),
        ("grad[dsd_loss]", worst_dsd <= 1e-4, f"max rel err {worst_dsd:.2e} over {len(seeds)} seeds"),
    ]


def check_ddim_inversion() -> tuple[str, bool, str]:
    worst = 0.0
    rng = np.random.default_rng(0)
    for T in (1, 10, 50):
        s = build_schedule("linear", T, 1e-3, 0.2) if T > 1 else build_schedule("constant", 1, 0.1)
        x0 = rng.standard_normal((4, 4, 3))
        eps = rng.standard_normal(x0.shape)
        x = forward_diffuse(x0, T, eps, s)
        for t in range(T, 0, -1):
            x = ddim_step(x, eps, t, s)
        worst = max(worst, float(np.max(np.abs(x - x0))))
    return ("ddim_inversion", worst <= 1e-9, f"max |x0 - x0_hat| {worst:.1e} for T in 1, 10, 50")


def check_ln2() -> tuple[str, bool, str]:
    model, world = _tiny_model()
    s = build_schedule("linear", 50, 1e-3, 0.2)
    theta = init_adapter(model.cfg)
    ref = theta.frozen_copy()
    worst = 0.0
    for seed in range(5):
        batch = PreferenceBatch(tuple(_tiny_sample(model, world, 10 * seed + k) for k in range(2)))
        worst = max(worst, abs(dsd_loss(batch, model, theta, ref, s, DSDConfig(), seed).item() - math.log(2)))
    return ("ln2_identity", worst <= 1e-9, f"max |loss - ln 2| {worst:.1e}")


def check_rank_oracle() -> tuple[str, bool, str]:
    rng = np.random.default_rng(0)
    n = 1000
    qs = np.round(rng.random(n), 2)  # coarse rounding forces ties
    dummy = np.zeros((1, 1, 1))
    scored = [ScoredCandidate(Candidate(i, dummy, (0,), dummy), 0.0, 0.0, float(q)) for i, q in enumerate(qs)]
    ranked = rank_levels(scored, 5)
    oracle = np.lexsort((np.arange(n), -qs))
    ok = [s.id for s in ranked] == list(oracle) and [s.level for s in ranked] == [5 - i // 200 for i in range(n)]
    return ("rank_oracle", ok, f"{n} candidates against lexsort")


def check_manifest_roundtrip() -> tuple[str, bool, str]:
    m = build_manifest(DatasetConfig(n_instances=4))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.jsonl"
        save_manifest(m, path)
        first = path.read_bytes()
        back = load_manifest(path)
        save_manifest(back, path)
        same_bytes = path.read_bytes() == first
    return ("manifest_roundtrip", back == m and same_bytes, f"{len(m.candidates)} candidates, {len(m.pairs)} pairs")


def check_gamma_zero() -> tuple[str, bool, str]:
    rng = np.random.default_rng(3)
    q, cp, ci = rng.standard_normal((5, 4)), rng.standard_normal((2, 6)), rng.standard_normal((3, 6))
    tk, tv, ik, iv = (rng.standard_normal((4, 6)) for _ in range(4))
    zero = fuse(q, cp, ci, tk, tv, ik, iv, 0.0).data
    text = fuse(q, cp, None, tk, tv).data
    f0, f1, f2 = (fuse(q, cp, ci, tk, tv, ik, iv, g).data for g in (0.0, 1.0, 2.0))
    affine = float(np.max(np.abs(f2 - 2 * f1 + f0)))
    ok = np.array_equal(zero, text) and affine <= 1e-12
    return ("gamma_zero", ok, f"text-only match {np.array_equal(zero, text)}, affine residual {affine:.1e}")


def check_tensor_roundtrip() -> tuple[str, bool, str]:
    a = np.random.default_rng(5).standard_normal((2, 3, 4))
    b = nx.from_bytes(nx.to_bytes(a))
    return ("tensor_roundtrip", np.array_equal(a, b) and b.shape == a.shape, "rank-3 float64")


def run_checks(corrupt: str | None = None) -> list[tuple[str, bool, str]]:
    ctx = nx.corrupted(corrupt) if corrupt else contextlib.nullcontext()
    with ctx:
        results = check_primitive_grads() + check_loss_grads()
        results += [
            check_ddim_inversion(),
            check_ln2(),
            check_rank_oracle(),
            check_manifest_roundtrip(),
            check_gamma_zero(),
            check_tensor_roundtrip(),
        ]
    return results
