"""Silhouette auto-encoder producing the conditioning embedding.

Compact convolutional encoder (three stride-2 blocks plus one dilated
block) with a mirrored decoder. Trained with reconstruction MSE plus an
augmentation-consistency MSE between the embeddings of an image and its
augmented version. After training the encoder is frozen and only encode()
is used by the diffusion stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .optim import AdamState, adam_step


@dataclass
class SilhouetteImage:
    pixels: np.ndarray  # (H, W) floats in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be 2D, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ConditionEmbedding:
    values: np.ndarray
    dropped: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite values")


def save_pgm(path, img: SilhouetteImage) -> None:
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode())
        fh.write(data.tobytes())


def load_pgm(path) -> SilhouetteImage:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise IOError(f"{path}: not a binary PGM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
        return SilhouetteImage(data.astype(np.float64) / maxval)


def augment(img: SilhouetteImage, seed: int) -> SilhouetteImage:
    """90-degree rotation with probability 1/2 plus uniform intensity jitter
    in +-0.2, clamped back to [0, 1]."""
    rng = np.random.default_rng(seed)
    px = img.pixels
    if rng.random() < 0.5:
        if img.height != img.width:
            raise ValueError("rotation requires a square image")
        px = np.rot90(px)
    jitter = rng.uniform(-0.2, 0.2)
    return SilhouetteImage(np.clip(px + jitter, 0.0, 1.0))


# ------------------------------------------------------------ conv plumbing
#
# Feature maps are (H*W, C) tensors; convolution is an im2col gather (index
# -1 marks zero padding) followed by a matmul with a (9*Cin, Cout) kernel.


@lru_cache(maxsize=None)
def _conv_indices(h: int, w: int, stride: int, dilation: int) -> np.ndarray:
    pad = dilation  # 'same' padding for a 3x3 kernel at the given dilation
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    idx = []
    for r in rows:
        for c in cols:
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr = r + dr * dilation
                    cc = c + dc * dilation
                    idx.append(rr * w + cc if 0 <= rr < h and 0 <= cc < w else -1)
    del pad
    return np.array(idx, dtype=np.int64)


@lru_cache(maxsize=None)
def _upsample_indices(h: int, w: int) -> np.ndarray:
    out = np.empty((2 * h, 2 * w), dtype=np.int64)
    for r in range(2 * h):
        for c in range(2 * w):
            out[r, c] = (r // 2) * w + (c // 2)
    return out.reshape(-1)


def _conv(x: T.DiffTensor, wgt: T.DiffTensor, bias: T.DiffTensor,
          h: int, w: int, stride: int = 1, dilation: int = 1) -> T.DiffTensor:
    cin = x.shape[1]
    cols = T.gather_rows(x, _conv_indices(h, w, stride, dilation))
    n_out = cols.shape[0] // 9
    cols = T.reshape(cols, (n_out, 9 * cin))
    return T.add(T.matmul(cols, wgt), T.broadcast_expand(bias, n_out))


ENC_CHANNELS = (8, 16, 32)


def init_ae_params(d: int, img_size: int, seed: int) -> dict[str, T.DiffTensor]:
    if img_size % 8 != 0:
        raise ValueError("image size must be divisible by 8")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = ENC_CHANNELS
    base = img_size // 8
    flat = base * base * c3

    def conv_w(cin, cout):
        return T.leaf(rng.uniform(-1, 1, (9 * cin, cout)) * np.sqrt(6.0 / (9 * cin)),
                      requires_grad=True)

    def lin_w(nin, nout):
        return T.leaf(rng.uniform(-1, 1, (nin, nout)) * np.sqrt(6.0 / nin),
                      requires_grad=True)

    def b(n):
        return T.leaf(np.zeros(n), requires_grad=True)

    return {
        "enc.c1": conv_w(1, c1), "enc.b1": b(c1),
        "enc.c2": conv_w(c1, c2), "enc.b2": b(c2),
        "enc.c3": conv_w(c2, c3), "enc.b3": b(c3),
        "enc.c4": conv_w(c3, c3), "enc.b4": b(c3),   # dilated block
        "enc.proj": lin_w(flat, d), "enc.projb": b(d),
        "dec.lin": lin_w(d, flat), "dec.linb": b(flat),
        "dec.c1": conv_w(c3, c2), "dec.b1": b(c2),
        "dec.c2": conv_w(c2, c1), "dec.b2": b(c1),
        "dec.c3": conv_w(c1, 1), "dec.b3": b(1),
    }


def _encode_graph(params, pixels: np.ndarray) -> T.DiffTensor:
    h = w = pixels.shape[0]
    x = T.leaf(pixels.reshape(h * w, 1))
    x = T.leaky_relu(_conv(x, params["enc.c1"], params["enc.b1"], h, w, stride=2))
    h //= 2; w //= 2
    x = T.leaky_relu(_conv(x, params["enc.c2"], params["enc.b2"], h, w, stride=2))
    h //= 2; w //= 2
    x = T.leaky_relu(_conv(x, params["enc.c3"], params["enc.b3"], h, w, stride=2))
    h //= 2; w //= 2
    x = T.leaky_relu(_conv(x, params["enc.c4"], params["enc.b4"], h, w, dilation=2))
    flat = T.reshape(x, (1, h * w * x.shape[1]))
    return T.add(T.matmul(flat, params["enc.proj"]),
                 T.reshape(params["enc.projb"], (1, params["enc.projb"].shape[0])))


def _decode_graph(params, z: T.DiffTensor, img_size: int) -> T.DiffTensor:
    c1, c2, c3 = ENC_CHANNELS
    h = w = img_size // 8
    x = T.add(T.matmul(z, params["dec.lin"]),
              T.reshape(params["dec.linb"], (1, params["dec.linb"].shape[0])))
    x = T.leaky_relu(T.reshape(x, (h * w, c3)))
    x = T.gather_rows(x, _upsample_indices(h, w))
    h *= 2; w *= 2
    x = T.leaky_relu(_conv(x, params["dec.c1"], params["dec.b1"], h, w))
    x = T.gather_rows(x, _upsample_indices(h, w))
    h *= 2; w *= 2
    x = T.leaky_relu(_conv(x, params["dec.c2"], params["dec.b2"], h, w))
    x = T.gather_rows(x, _upsample_indices(h, w))
    h *= 2; w *= 2
    x = _conv(x, params["dec.c3"], params["dec.b3"], h, w)
    return T.sigmoid(T.reshape(x, (h, w)))


def encode(params: dict[str, T.DiffTensor], img: SilhouetteImage) -> ConditionEmbedding:
    size = _expected_size(params)
    if img.height != size or img.width != size:
        raise ValueError(f"expected {size}x{size} image, got {img.height}x{img.width}")
    with T.Tape():
        z = _encode_graph(params, img.pixels)
    return ConditionEmbedding(z.data.reshape(-1))


def decode(params: dict[str, T.DiffTensor], z: ConditionEmbedding) -> SilhouetteImage:
    size = _expected_size(params)
    with T.Tape():
        zt = T.leaf(z.values.reshape(1, -1))
        img = _decode_graph(params, zt, size)
    return SilhouetteImage(img.data)


def _expected_size(params) -> int:
    flat = params["enc.proj"].shape[0]
    base = int(round(np.sqrt(flat // ENC_CHANNELS[2])))
    return base * 8


def ae_loss(I: T.DiffTensor, I_hat: T.DiffTensor, z_I: T.DiffTensor,
            z_I_a: T.DiffTensor) -> T.DiffTensor:
    """Reconstruction MSE plus embedding-consistency MSE."""
    return T.add(T.mse(I, I_hat), T.mse(z_I, z_I_a))


def train_autoencoder(images: list[SilhouetteImage], epochs: int = 30,
                      lr: float = 0.0002, d: int = 128, seed: int = 0,
                      stop_grad_augmented: bool = False,
                      log_fn=None) -> dict[str, T.DiffTensor]:
    """Train on the image list; returns the parameters (caller treats them
    as frozen afterwards)."""
    if not images:
        raise ValueError("empty dataset")
    size = images[0].height
    params = init_ae_params(d, size, seed)
    state = AdamState(params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for i in order:
            img = images[int(i)]
            aug = augment(img, int(rng.integers(2 ** 31)))
            with T.Tape() as tape:
                z = _encode_graph(params, img.pixels)
                recon = _decode_graph(params, z, size)
                if stop_grad_augmented:
                    with T.Tape():
                        z_a = T.leaf(_encode_graph(params, aug.pixels).data)
                else:
                    z_a = _encode_graph(params, aug.pixels)
                loss = ae_loss(T.leaf(img.pixels), recon, z, z_a)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(f"autoencoder diverged at epoch {epoch}")
                tape.backward(loss)
            for p in params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            adam_step(state, params)
            total += loss.item()
        if log_fn is not None:
            log_fn(epoch, total / len(images))
    return params
