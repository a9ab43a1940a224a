"""Noise schedules, forward diffusion, deterministic DDIM reverse steps, and the
noise-prediction loss."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .numerics import ArrayLike, Tensor, mul, sq_norm, sub

__all__ = [
    "ConfigError",
    "NoiseSchedule",
    "WeightFn",
    "build_schedule",
    "forward_diffuse",
    "forward_step",
    "ddim_step",
    "ddim_sample",
    "dm_loss",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[t-1]`` / ``alpha[t-1]`` hold step t; ``alpha_bar[t]`` with ``alpha_bar[0] == 1``."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise IndexError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def snr(self, t: int) -> float:
        """Signal-to-noise ratio alpha_bar/(1 - alpha_bar)."""
        ab = self.alpha_bar[self.check_t(t)]
        return float(ab / (1.0 - ab))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(d["kind"], d["T"], d["beta_start"], d["beta_end"])


@dataclass(frozen=True)
class WeightFn:
    """Timestep weighting; only the constant form is used."""

    kind: str = "constant"
    value: float = 1.0

    def __post_init__(self):
        if self.kind != "constant":
            raise ConfigError(f"unsupported weighting {self.kind!r}")
        if not self.value > 0:
            raise ConfigError("weight must be positive")

    def __call__(self, snr: float) -> float:
        return self.value


def build_schedule(kind: str, T: int, beta_start: float, beta_end: float | None = None) -> NoiseSchedule:
    if beta_end is None:
        beta_end = beta_start
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if kind == "constant":
        if not 0 < beta_start < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {beta_start}")
        beta = np.full(T, float(beta_start))
        beta_end = beta_start
    elif kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(kind, int(T), beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def _same_shape(a: ArrayLike, b: ArrayLike, what: str) -> None:
    sa, sb = np.shape(a.data if isinstance(a, Tensor) else a), np.shape(b.data if isinstance(b, Tensor) else b)
    if sa != sb:
        raise ValueError(f"{what}: shapes {sa} and {sb} differ")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal sample x_t given x_0 and a unit-Gaussian draw."""
    ab = s.alpha_bar[s.check_t(t)]
    _same_shape(x0, eps, "forward_diffuse")
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def forward_step(x_prev: np.ndarray, t: int, n: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """One Markov step x_{t-1} -> x_t."""
    b = s.beta[s.check_t(t) - 1]
    _same_shape(x_prev, n, "forward_step")
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(n)


def ddim_step(xt: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update x_t -> x_{t-1}."""
    t = s.check_t(t)
    ab_t, ab_prev = s.alpha_bar[t], s.alpha_bar[t - 1]
    xt, eps_hat = np.asarray(xt), np.asarray(eps_hat)
    x0_hat = (xt - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_sample(
    predict: Callable[[np.ndarray, int], np.ndarray],
    shape: tuple[int, ...],
    s: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    x = np.random.default_rng(seed).standard_normal(shape)
    for t in range(s.T, 0, -1):
        x = ddim_step(x, predict(x, t), t, s)
    return x


def dm_loss(eps: ArrayLike, eps_hat: ArrayLike, t: int, w: WeightFn, s: NoiseSchedule) -> Tensor:
    """Weighted squared error between true and predicted noise (differentiable in both)."""
    _same_shape(eps, eps_hat, "dm_loss")
    return mul(w(s.snr(t)), sq_norm(sub(eps, eps_hat)))
