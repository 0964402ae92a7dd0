"""Forward noising, x0 reconstruction, guided noise combination and the
ancestral sampling loops (base and upsampler)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import PointCloud
from .schedule import NoiseSchedule


@dataclass
class SampleTrace:
    seed: int
    gamma: float
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noisy state: sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: shapes {x0.shape} vs {eps.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reconstruct_x0(xt: np.ndarray, t: int, eps_hat: np.ndarray,
                   schedule: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of forward_noise given a noise estimate."""
    if xt.shape != eps_hat.shape:
        raise ValueError(f"reconstruct_x0: shapes {xt.shape} vs {eps_hat.shape}")
    ab = schedule.alpha_bar(t)
    return (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def reconstruct_x0_diff(xt: np.ndarray, t: int, eps_hat: T.DiffTensor,
                        schedule: NoiseSchedule) -> T.DiffTensor:
    """Differentiable reconstruction used inside the footprint loss; xt is a
    constant, gradients flow through eps_hat only."""
    if tuple(xt.shape) != tuple(eps_hat.shape):
        raise ValueError(f"reconstruct_x0: shapes {xt.shape} vs {eps_hat.shape}")
    ab = schedule.alpha_bar(t)
    xt_c = T.leaf(xt)
    return T.scale(T.sub(xt_c, T.scale(eps_hat, np.sqrt(1.0 - ab))),
                   1.0 / np.sqrt(ab))


def guided_epsilon(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                   gamma: float) -> np.ndarray:
    """(1+gamma) * conditional - gamma * unconditional."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"guided_epsilon: shapes {eps_cond.shape} vs {eps_uncond.shape}")
    return (1.0 + gamma) * eps_cond - gamma * eps_uncond


def ancestral_step(xt: np.ndarray, t: int, eps_guided: np.ndarray,
                   z: np.ndarray | None, schedule: NoiseSchedule) -> np.ndarray:
    """One reverse step; at t=1 sigma is 0 so z is ignored."""
    if t < 1:
        raise ValueError(f"t={t} below 1")
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    mean = (xt - (1.0 - a) / np.sqrt(1.0 - ab) * eps_guided) / np.sqrt(a)
    sigma = schedule.sigma(t)
    if t > 1 and sigma > 0.0:
        if z is None:
            raise ValueError("z required for t > 1")
        mean = mean + sigma * z
    return mean


def _predict(model, xt, t, z_I, gamma):
    eps_c = model(xt, t, z_I)
    if not np.all(np.isfinite(eps_c)):
        raise FloatingPointError(f"non-finite model output at step t={t}")
    if gamma == 0.0:
        return eps_c
    eps_u = model(xt, t, None)
    if not np.all(np.isfinite(eps_u)):
        raise FloatingPointError(f"non-finite unconditional output at t={t}")
    return guided_epsilon(eps_c, eps_u, gamma)


def sample_base(model, z_I, K: int, gamma: float, seed: int,
                schedule: NoiseSchedule,
                trace_stride: int = 0) -> tuple[PointCloud, SampleTrace]:
    """Full reverse chain from Gaussian noise to a K-point cloud.

    model(xt, t, z_I_or_None) -> (K,3) noise prediction. Deterministic in
    (seed, gamma, model).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((K, 3))
    trace = SampleTrace(seed=seed, gamma=gamma)
    for t in range(schedule.T, 0, -1):
        eps = _predict(model, x, t, z_I, gamma)
        z = rng.standard_normal((K, 3)) if t > 1 else None
        x = ancestral_step(x, t, eps, z, schedule)
        if trace_stride and (t % trace_stride == 0 or t == 1):
            trace.snapshots.append((t - 1, x.copy()))
    return PointCloud(x, meta={"seed": seed, "gamma": gamma}), trace


def sample_upsampled(model, z_I, lowres: PointCloud, N: int, gamma: float,
                     seed: int, schedule: NoiseSchedule,
                     trace_stride: int = 0) -> tuple[PointCloud, SampleTrace]:
    """Upsampling chain: the first K positions are re-imposed with the
    low-resolution cloud before every model call, so they survive bitwise."""
    K = lowres.count
    if N <= K:
        raise ValueError(f"N={N} must exceed K={K}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((N, 3))
    trace = SampleTrace(seed=seed, gamma=gamma)
    for t in range(schedule.T, 0, -1):
        x[:K] = lowres.points
        eps = _predict(model, x, t, z_I, gamma)
        z = rng.standard_normal((N, 3)) if t > 1 else None
        x = ancestral_step(x, t, eps, z, schedule)
        if trace_stride and (t % trace_stride == 0 or t == 1):
            trace.snapshots.append((t - 1, x.copy()))
    x[:K] = lowres.points
    return PointCloud(x, meta={"seed": seed, "gamma": gamma, "K": K}), trace
