"""Conditional noise-prediction network.

Per-point shared MLP with a global max-pool context vector, fused with the
image-condition / time-step feature map. Permutation equivariant by
construction. A learned null embedding stands in for dropped conditions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .schedule import sinusoidal_embedding


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 128        # condition / temporal embedding width
    w1: int = 64        # point MLP hidden
    w2: int = 128       # point feature width (also pooled context width)
    wd: int = 128       # decoder hidden


def _kaiming(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_denoiser_params(cfg: DenoiserConfig, seed: int) -> dict[str, T.DiffTensor]:
    rng = np.random.default_rng(seed)
    d, w1, w2, wd = cfg.d, cfg.w1, cfg.w2, cfg.wd
    spec = {
        "time.w1": (d, (d, d)),
        "time.b1": None,
        "time.w2": (d, (d, d)),
        "time.b2": None,
        "fuse.w1": (2 * d, (2 * d, d)),
        "fuse.b1": None,
        "fuse.w2": (d, (d, d)),
        "fuse.b2": None,
        "point.w1": (3, (3, w1)),
        "point.b1": None,
        "point.w2": (w1, (w1, w2)),
        "point.b2": None,
        "dec.w1": (2 * w2 + d, (2 * w2 + d, wd)),
        "dec.b1": None,
        "dec.w2": (wd, (wd, wd)),
        "dec.b2": None,
    }
    params: dict[str, T.DiffTensor] = {}
    for name, s in spec.items():
        if s is None:
            out_dim = params[name.replace(".b", ".w")].shape[1]
            params[name] = T.leaf(np.zeros(out_dim), requires_grad=True)
        else:
            fan_in, shape = s
            params[name] = T.leaf(_kaiming(rng, fan_in, shape), requires_grad=True)
    # final layer zero so the fresh network predicts eps ~ 0
    params["dec.out_w"] = T.leaf(np.zeros((wd, 3)), requires_grad=True)
    params["dec.out_b"] = T.leaf(np.zeros(3), requires_grad=True)
    params["null_embed"] = T.leaf(rng.uniform(-0.1, 0.1, size=d), requires_grad=True)
    return params


def config_from_params(params: dict[str, T.DiffTensor]) -> DenoiserConfig:
    return DenoiserConfig(
        d=params["null_embed"].shape[0],
        w1=params["point.w1"].shape[1],
        w2=params["point.w2"].shape[1],
        wd=params["dec.w1"].shape[1],
    )


def _linear(x: T.DiffTensor, w: T.DiffTensor, b: T.DiffTensor) -> T.DiffTensor:
    rows = x.shape[0]
    return T.add(T.matmul(x, w), T.broadcast_expand(b, rows))


def fuse_conditions(params: dict[str, T.DiffTensor], z_I: np.ndarray | None,
                    t: int, K: int) -> T.DiffTensor:
    """Build the (K, d) condition feature map from the time embedding and
    the image embedding (or the learned null embedding when dropped)."""
    d = params["null_embed"].shape[0]
    if z_I is not None and len(np.asarray(z_I).reshape(-1)) != d:
        raise ValueError(f"condition dim {len(z_I)} != d={d}")
    zt = T.leaf(sinusoidal_embedding(t, d).reshape(1, d))
    zt = T.leaky_relu(_linear(zt, params["time.w1"], params["time.b1"]))
    zt = T.leaky_relu(_linear(zt, params["time.w2"], params["time.b2"]))
    if z_I is None:
        cond = T.reshape(params["null_embed"], (1, d))
    else:
        cond = T.leaf(np.asarray(z_I, dtype=np.float64).reshape(1, d))
    both = T.concat_last_axis([
        T.broadcast_expand(cond, K),
        T.broadcast_expand(zt, K),
    ])
    h = T.leaky_relu(_linear(both, params["fuse.w1"], params["fuse.b1"]))
    return T.leaky_relu(_linear(h, params["fuse.w2"], params["fuse.b2"]))


def denoise_graph(params: dict[str, T.DiffTensor], xt: np.ndarray, t: int,
                  z_I: np.ndarray | None) -> T.DiffTensor:
    """Differentiable forward pass; returns the (K, 3) noise prediction."""
    if xt.ndim != 2 or xt.shape[1] != 3:
        raise ValueError(f"xt must be (K,3), got {xt.shape}")
    K = xt.shape[0]
    x = T.leaf(xt)
    h = T.leaky_relu(_linear(x, params["point.w1"], params["point.b1"]))
    h = T.leaky_relu(_linear(h, params["point.w2"], params["point.b2"]))
    ctx = T.broadcast_expand(T.reduce_max_over_points(h), K)
    fused = fuse_conditions(params, z_I, t, K)
    feat = T.concat_last_axis([h, ctx, fused])
    out = T.leaky_relu(_linear(feat, params["dec.w1"], params["dec.b1"]))
    out = T.leaky_relu(_linear(out, params["dec.w2"], params["dec.b2"]))
    out = _linear(out, params["dec.out_w"], params["dec.out_b"])
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite activations in decoder output")
    return out


def denoise(params: dict[str, T.DiffTensor], xt: np.ndarray, t: int,
            z_I: np.ndarray | None) -> np.ndarray:
    """Forward-only evaluation (no gradients kept)."""
    with T.Tape():
        return denoise_graph(params, xt, t, z_I).data


def make_model(params: dict[str, T.DiffTensor]):
    """Adapter for the sampling loops: model(xt, t, z_I_or_None) -> (K,3)."""
    def model(xt, t, z_I):
        return denoise(params, xt, t, z_I)
    return model


def parameter_count(params: dict[str, T.DiffTensor]) -> int:
    return sum(p.size for p in params.values())
