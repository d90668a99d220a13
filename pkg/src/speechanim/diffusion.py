"""Noise schedule, forward noising, training objective and the sampler.

The model regresses the clean sequence directly (predict-x0), so sampling
re-noises the current prediction down to the next level instead of taking a
learned reverse-posterior step: starting from pure Gaussian noise at level T,
each iteration predicts x0_hat and, unless it was the last, diffuses it back
to level t-1 with the closed-form forward process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AnimationSequence, RIG_KIND
from .errors import ConfigurationError, ContractError, NumericDivergenceError


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion constants: beta_t, alpha_t = 1 - beta_t, alpha_bar_t.

    Arrays are indexed by t-1 for t in [1, T]; level 0 is the identity
    (alpha_bar_0 = 1).
    """

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ContractError(f"timestep {t} outside [1, {self.steps}]")


def build_linear_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive.

    The default endpoints are the conventional 1e-4 .. 0.02 range; both are
    config-exposed.
    """
    if steps < 1:
        raise ConfigurationError(f"diffusion steps must be >= 1, got {steps}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ConfigurationError("beta endpoints must lie in (0, 1)")
    if steps > 1 and not beta_start < beta_end:
        raise ConfigurationError(f"need beta_start < beta_end, got {beta_start} >= {beta_end}")
    beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(steps=steps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass
class DiffusionSample:
    """A noised sequence together with the Gaussian draw that produced it."""

    x_t: np.ndarray
    t: int
    eps: np.ndarray


def q_sample_step(
    x_prev: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> DiffusionSample:
    """One forward step: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    beta_t = sched.beta_at(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = rng.standard_normal(x_prev.shape)
    x_t = np.sqrt(1.0 - beta_t) * x_prev + np.sqrt(beta_t) * eps
    return DiffusionSample(x_t=x_t, t=t, eps=eps)


def q_sample_closed_form(
    x_0: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> DiffusionSample:
    """Jump straight to level t: x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps.

    t = 0 is the identity level (alpha_bar_0 = 1), returned with zero noise
    contribution.
    """
    if t < 0:
        raise ContractError(f"timestep {t} outside [0, {sched.steps}]")
    alpha_bar_t = sched.alpha_bar_at(t)
    x_0 = np.asarray(x_0, dtype=np.float64)
    eps = rng.standard_normal(x_0.shape)
    x_t = np.sqrt(alpha_bar_t) * x_0 + np.sqrt(1.0 - alpha_bar_t) * eps
    return DiffusionSample(x_t=x_t, t=t, eps=eps)


def training_loss(x_0, x_hat, kind: str = "mse"):
    """Elementwise reconstruction loss between clean and predicted motion.

    Mean squared error by default, mean absolute error as the alternative.
    Works on numpy arrays and on autograd tensors alike.
    """
    if tuple(x_0.shape) != tuple(x_hat.shape):
        raise ContractError(f"loss shapes differ: {tuple(x_0.shape)} vs {tuple(x_hat.shape)}")
    diff = x_0 - x_hat
    if kind == "mse":
        return (diff * diff).mean()
    if kind == "mae":
        return abs(diff).mean()
    raise ConfigurationError(f"unknown loss kind {kind!r}, expected mse|mae")


def sample_loop(
    audio_feats: np.ndarray,
    style,
    sched: NoiseSchedule,
    model,
    rng: np.random.Generator,
    steps: int | None = None,
    *,
    out_dim: int | None = None,
    kind: str = RIG_KIND,
    fps: float = 30.0,
    subject: str = "generated",
    sentence: str = "sample",
    eval_counter: list | None = None,
) -> AnimationSequence:
    """Iterative denoising from level T down.

    ``model(audio_feats, x_t, t, style)`` must return the predicted clean
    N x D sequence. Each iteration re-noises the prediction to the next lower
    level and feeds it back. Early exit after ``steps`` iterations returns the
    prediction as it stands; the predict-x0 objective makes partial runs
    usable, at reduced quality.
    """
    n_frames = audio_feats.shape[0]
    total = sched.steps
    if steps is None:
        steps = total
    if not 1 <= steps <= total:
        raise ConfigurationError(f"sample steps must lie in [1, {total}], got {steps}")
    if out_dim is None:
        out_dim = getattr(model, "output_dim", None)
    if out_dim is None:
        raise ContractError("sample_loop needs out_dim (or a model exposing output_dim)")

    x_t = rng.standard_normal((n_frames, out_dim))
    x_hat = None
    done = 0
    for t in range(total, 0, -1):
        x_hat = np.asarray(model(audio_feats, x_t, t, style), dtype=np.float64)
        if x_hat.shape != (n_frames, out_dim):
            raise ContractError(f"model returned shape {x_hat.shape}, expected {(n_frames, out_dim)}")
        if not np.isfinite(x_hat).all():
            raise NumericDivergenceError(f"non-finite model output at denoising step t={t}")
        if eval_counter is not None:
            eval_counter.append(t)
        done += 1
        if done >= steps:
            break
        if t > 1:
            x_t = q_sample_closed_form(x_hat, t - 1, sched, rng).x_t
    return AnimationSequence(
        frames=x_hat.astype(np.float32), kind=kind, fps=fps, subject=subject, sentence=sentence
    )
