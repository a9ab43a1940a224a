"""Pairwise preference objectives for the conditioned denoiser.

``dsd_loss`` scores a (winning, losing) target pair by how much more the
trainable adapter improves noise prediction on the winner than on the loser,
both measured against a frozen reference adapter.  ``dd_loss`` is the same
computation with the image branch switched off.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import Model
from .numerics import ParamSet, Tensor, add, mul, softplus, sq_norm, sub
from .schedule import ConfigError, NoiseSchedule, WeightFn, forward_diffuse

__all__ = [
    "DSDConfig",
    "PreferenceSample",
    "PreferenceBatch",
    "bt_loss",
    "dsd_inner",
    "dsd_loss",
    "dd_loss",
    "implicit_reward_gap",
    "draw_noise",
]


@dataclass(frozen=True)
class DSDConfig:
    beta: float = 500.0
    T: int = 50
    omega: WeightFn = field(default_factory=WeightFn)

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be a positive integer")

    def scale(self, s: NoiseSchedule, t: int) -> float:
        """beta * T * omega(lambda_t)."""
        return self.beta * self.T * self.omega(s.snr(t))

    def to_dict(self) -> dict:
        return {"beta": self.beta, "T": self.T, "omega": {"kind": self.omega.kind, "value": self.omega.value}}


@dataclass(frozen=True)
class PreferenceSample:
    """Instruction embedding, raw reference-image embedding, winner and loser images."""

    c_p: np.ndarray
    img_emb: np.ndarray
    y0_w: np.ndarray
    y0_l: np.ndarray

    def __post_init__(self):
        if np.shape(self.y0_w) != np.shape(self.y0_l):
            raise ValueError(f"winner {np.shape(self.y0_w)} and loser {np.shape(self.y0_l)} shapes differ")

    def swapped(self) -> "PreferenceSample":
        return PreferenceSample(self.c_p, self.img_emb, self.y0_l, self.y0_w)


@dataclass(frozen=True)
class PreferenceBatch:
    """Samples sharing one timestep policy: t uniform on 1..T, drawn per sample."""

    samples: tuple[PreferenceSample, ...]
    timesteps: str = "uniform"

    def __post_init__(self):
        if not self.samples:
            raise ValueError("preference batch is empty")
        if self.timesteps != "uniform":
            raise ConfigError(f"unknown timestep policy {self.timesteps!r}")

    def __len__(self) -> int:
        return len(self.samples)


def bt_loss(r_w: float, r_l: float) -> float:
    """Negative log-likelihood that the winner beats the loser."""
    return float(np.logaddexp(0.0, -(r_w - r_l)))


def dsd_inner(
    model: Model,
    theta: ParamSet,
    ref: ParamSet,
    sample: PreferenceSample,
    t: int,
    eps_w: np.ndarray,
    eps_l: np.ndarray,
    s: NoiseSchedule,
    gamma: float = 1.0,
) -> Tensor:
    """Winner error change minus loser error change, each relative to ``ref``."""
    if np.shape(eps_w) != np.shape(sample.y0_w) or np.shape(eps_l) != np.shape(sample.y0_l):
        raise ValueError("noise draws must match target shapes")
    yt_w = forward_diffuse(sample.y0_w, t, eps_w, s)
    yt_l = forward_diffuse(sample.y0_l, t, eps_l, s)

    def err(y, e, p):
        return sq_norm(sub(e, model.predict(y, sample.c_p, sample.img_emb, t, p, gamma)))

    win = sub(err(yt_w, eps_w, theta), err(yt_w, eps_w, ref))
    lose = sub(err(yt_l, eps_l, theta), err(yt_l, eps_l, ref))
    return sub(win, lose)


def draw_noise(rng: np.random.Generator, T: int, shape: tuple[int, ...]) -> tuple[int, np.ndarray, np.ndarray]:
    """One (t, eps_w, eps_l) draw; t is shared, the two noises are independent."""
    t = int(rng.integers(1, T + 1))
    return t, rng.standard_normal(shape), rng.standard_normal(shape)


def _check_T(s: NoiseSchedule, cfg: DSDConfig) -> None:
    if s.T != cfg.T:
        raise ConfigError(f"schedule has T={s.T} but objective expects T={cfg.T}")


def dsd_loss(
    batch: PreferenceBatch,
    model: Model,
    theta: ParamSet,
    ref: ParamSet,
    s: NoiseSchedule,
    cfg: DSDConfig,
    seed: int,
    gamma: float = 1.0,
) -> Tensor:
    """Batch mean of softplus(beta*T*omega*inner), i.e. -log sigmoid of the negated scaled inner term."""
    _check_T(s, cfg)
    rng = np.random.default_rng(seed)
    acc = None
    for sample in batch.samples:
        t, eps_w, eps_l = draw_noise(rng, cfg.T, np.shape(sample.y0_w))
        inner = dsd_inner(model, theta, ref, sample, t, eps_w, eps_l, s, gamma)
        term = softplus(mul(cfg.scale(s, t), inner))
        acc = term if acc is None else add(acc, term)
    return mul(acc, 1.0 / len(batch))


def dd_loss(
    batch: PreferenceBatch,
    model: Model,
    theta: ParamSet,
    ref: ParamSet,
    s: NoiseSchedule,
    cfg: DSDConfig,
    seed: int,
) -> Tensor:
    """Text-only preference loss: ``dsd_loss`` with the image branch weight at zero."""
    return dsd_loss(batch, model, theta, ref, s, cfg, seed, gamma=0.0)


def implicit_reward_gap(
    model: Model,
    theta: ParamSet,
    ref: ParamSet,
    sample: PreferenceSample,
    s: NoiseSchedule,
    cfg: DSDConfig,
    n_draws: int,
    seed: int,
    gamma: float = 1.0,
) -> float:
    """Monte-Carlo mean of -beta*T*omega*inner; positive means the winner is preferred."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    _check_T(s, cfg)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_draws):
        t, eps_w, eps_l = draw_noise(rng, cfg.T, np.shape(sample.y0_w))
        inner = dsd_inner(model, theta, ref, sample, t, eps_w, eps_l, s, gamma)
        total += -cfg.scale(s, t) * inner.item()
    return total / n_draws
