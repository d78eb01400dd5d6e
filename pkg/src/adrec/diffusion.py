"""Noise schedule tables and the token-independent diffusion operations.

Every token carries its own integer timestep (the grid), so the forward
noising and the timestep embedding are indexed per token. Training draws
grids uniformly from {1..T} at valid positions (0 would make the
denoising target a no-op); inference keeps the whole history at step 0
and walks only the final position down from T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

SCHEDULE_KINDS = ("truncated_linear", "beta_linear")

ALPHA_BAR_FLOOR = 1e-4
BETA_MAX = 0.999


@dataclass
class NoiseSchedule:
    """Per-step noise tables, indexed directly by timestep.

    beta[t] and posterior_var[t] are defined for t=1..T (index 0 is an
    unused 0.0 sentinel); alpha_bar[t] covers t=0..T with alpha_bar[0]=1
    and is exactly the cumulative product of (1 - beta).
    """

    t_max: int
    kind: str
    beta: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray


def build_schedule(t_max: int, kind: str = "truncated_linear") -> NoiseSchedule:
    if t_max < 1:
        raise ConfigError(f"diffusion steps must be >= 1, got {t_max}")
    if kind == "truncated_linear":
        # signal level decays linearly with a floor keeping alpha_bar positive
        raw = np.maximum(1.0 - np.arange(t_max + 1) / (t_max + 1.0), ALPHA_BAR_FLOOR)
        beta = 1.0 - raw[1:] / raw[:-1]
    elif kind == "beta_linear":
        beta = np.linspace(1e-4, 0.02, t_max)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    beta = np.clip(beta, 1e-12, BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    beta = np.concatenate([[0.0], beta])
    posterior_var = np.zeros_like(beta)
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(t_max, kind, beta, alpha_bar, posterior_var)


def _check_grid(grid: np.ndarray, t_max: int) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.size and (grid.min() < 0 or grid.max() > t_max):
        raise ValueError(f"timestep grid outside [0, {t_max}]: [{grid.min()}, {grid.max()}]")
    return grid


def q_sample(x0: Tensor, grid: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    """Closed-form forward noising, one independent timestep per token.

    x0: (B, L, D); grid: (B, L) ints; eps: standard-normal draw supplied
    by the caller so tests can inject fixed noise. Tokens at step 0 pass
    through unchanged. Differentiable in x0.
    """
    grid = _check_grid(grid, schedule.t_max)
    if grid.shape != x0.shape[:-1]:
        raise ValueError(f"grid {grid.shape} does not match tokens of x0 {x0.shape}")
    eps = np.asarray(eps, dtype=x0.data.dtype)
    if eps.shape != x0.shape:
        raise ValueError(f"eps {eps.shape} does not match x0 {x0.shape}")
    a_bar = schedule.alpha_bar[grid][..., None]
    signal = np.sqrt(a_bar).astype(x0.data.dtype)
    noise = np.sqrt(1.0 - a_bar).astype(x0.data.dtype)
    return T.add(T.mul(x0, signal), eps * noise)


def sample_train_grid(batch: int, length: int, t_max: int, pad_mask: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform steps in {1..T} at valid positions, 0 at padding."""
    grid = rng.integers(1, t_max + 1, size=(batch, length))
    grid[np.asarray(pad_mask) == 0] = 0
    return grid


def posterior_mean(x_t: np.ndarray, x0_hat: np.ndarray, t: int,
                   schedule: NoiseSchedule) -> np.ndarray:
    """Mean of the reverse-step Gaussian, parameterized by the predicted clean token.

    mu = sqrt(1-beta_t) (1-abar_{t-1})/(1-abar_t) x_t
       + sqrt(abar_{t-1}) beta_t / (1-abar_t)     x0_hat

    At t=1 the x_t coefficient vanishes and the x0 coefficient telescopes
    to 1, so mu equals x0_hat.
    """
    if not 1 <= t <= schedule.t_max:
        raise ValueError(f"posterior step must be in [1, {schedule.t_max}], got {t}")
    beta_t = schedule.beta[t]
    abar_t = schedule.alpha_bar[t]
    abar_prev = schedule.alpha_bar[t - 1]
    coef_xt = np.sqrt(1.0 - beta_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    coef_x0 = np.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
    return coef_xt * np.asarray(x_t) + coef_x0 * np.asarray(x0_hat)


def inference_grid(length: int, step: int) -> np.ndarray:
    """Zeros everywhere except the final position, which carries the step."""
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    grid = np.zeros(length, dtype=np.int64)
    grid[-1] = step
    return grid


def schedule_rows(schedule: NoiseSchedule) -> list[dict]:
    """Tabular view (t, beta, alpha_bar, posterior variance) for the CSV dump."""
    rows = [{"t": 0, "beta": "", "alpha_bar": f"{schedule.alpha_bar[0]:.12g}", "posterior_var": ""}]
    for t in range(1, schedule.t_max + 1):
        rows.append({
            "t": t,
            "beta": f"{schedule.beta[t]:.12g}",
            "alpha_bar": f"{schedule.alpha_bar[t]:.12g}",
            "posterior_var": f"{schedule.posterior_var[t]:.12g}",
        })
    return rows
