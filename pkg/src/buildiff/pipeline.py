"""Training loops for the three stages (auto-encoder, base diffusion,
upsampler diffusion), the footprint regularization loss, experiment
configuration, and resumable checkpointing."""

from __future__ import annotations

import dataclasses
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .conditioner import (ConditionEmbedding, encode, load_pgm,
                          train_autoencoder)
from .denoiser import DenoiserConfig, denoise_graph, init_denoiser_params
from .diffusion import forward_noise, reconstruct_x0_diff
from .datagen import DatasetManifest
from .geometry import (PointCloud, farthest_point_sample, load_bpc,
                       nearest_indices)
from .optim import AdamState, adam_step
from .schedule import NoiseSchedule, lambda_weight, linear_beta_schedule

# counts nearest-neighbour index computations inside the footprint loss;
# lambda(t)=0 steps must not add to it
reg_nn_queries = 0


@dataclass
class TrainConfig:
    T: int = 1000
    T_upsampler: int = 500
    beta_1: float = 0.0001
    beta_T: float = 0.02
    K: int = 1024
    N: int = 4096
    d: int = 128
    rho: float = 0.001
    drop_prob: float = 0.1
    gamma: float = 4.0
    lr: float = 0.0002
    epochs_ae: int = 30
    epochs_base: int = 700
    epochs_upsampler: int = 200
    batch_size: int = 8
    seed: int = 0
    sigma_mode: str = "large"
    img_size: int = 32
    checkpoint_interval: int = 10  # epochs
    upsampler_condition: str = "fps"  # fps | sampled

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for f in dataclasses.fields(self):
                fh.write(f"{f.name}={getattr(self, f.name)}\n")

    @staticmethod
    def load(path) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
        casts = {"int": int, "float": float, "str": str}
        kwargs = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in types:
                    raise ValueError(f"unknown config key {key!r}")
                kwargs[key] = casts[types[key]](value.strip())
        return TrainConfig(**kwargs)


def toy_config(seed: int = 0) -> TrainConfig:
    """Desk-scale settings used by the acceptance suite."""
    return TrainConfig(T=100, T_upsampler=50, K=256, N=1024, d=32,
                       epochs_ae=20, epochs_base=200, epochs_upsampler=30,
                       sigma_mode="posterior", seed=seed)


@dataclass
class StepLog:
    epoch: int
    step: int
    L_eps: float
    L_reg: float
    L_theta: float
    t_drawn: list[int]
    lambda_drawn: list[float]
    dropped: list[bool]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def regularization_loss(x0: np.ndarray, x0_hat: T.DiffTensor, t: int,
                        schedule: NoiseSchedule) -> T.DiffTensor:
    """lambda(t) * Chamfer(proj(x0), proj(x0_hat)).

    Nearest-neighbour indices are taken as constants for the backward pass
    (the standard Chamfer subgradient). When lambda(t) is 0 the Chamfer
    computation is skipped entirely and a constant zero is returned.
    """
    global reg_nn_queries
    if x0.shape != tuple(x0_hat.shape):
        raise ValueError(f"count mismatch: {x0.shape} vs {x0_hat.shape}")
    lam = lambda_weight(t, schedule.T)
    if lam == 0.0:
        return T.leaf(np.array(0.0))
    mask = np.ones_like(x0)
    mask[:, 2] = 0.0
    gt = x0 * mask
    proj_hat = T.mul(x0_hat, T.leaf(mask))
    hat_vals = proj_hat.data
    idx_hat_to_gt = nearest_indices(hat_vals, gt)
    idx_gt_to_hat = nearest_indices(gt, hat_vals)
    reg_nn_queries += len(gt) + len(hat_vals)
    # mean squared point distance = 3 * elementwise MSE over (n,3)
    term1 = T.scale(T.mse(proj_hat, T.leaf(gt[idx_hat_to_gt])), 3.0)
    term2 = T.scale(T.mse(T.gather_rows(proj_hat, idx_gt_to_hat), T.leaf(gt)), 3.0)
    return T.scale(T.add(term1, term2), lam)


def _finish_step(params, state, tape, loss):
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite training loss")
    tape.backward(loss)
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(state, params)


def train_step_base(params, state: AdamState,
                    batch: list[tuple[np.ndarray, ConditionEmbedding]],
                    config: TrainConfig, schedule: NoiseSchedule,
                    rng: np.random.Generator, epoch: int = 0,
                    step: int = 0) -> StepLog:
    """One optimizer step of the base diffusion over a batch of
    (K,3)-cloud / embedding pairs, with per-sample classifier-free drop."""
    if not batch:
        raise ValueError("empty batch")
    ts, lams, drops = [], [], []
    with T.Tape() as tape:
        eps_terms, reg_terms = [], []
        for x0, emb in batch:
            t = int(rng.integers(1, schedule.T + 1))
            eps = rng.standard_normal(x0.shape)
            dropped = bool(rng.random() < config.drop_prob) or emb.dropped
            z_I = None if dropped else emb.values
            xt = forward_noise(x0, t, eps, schedule)
            eps_hat = denoise_graph(params, xt, t, z_I)
            eps_terms.append(T.mse(T.leaf(eps), eps_hat))
            x0_hat = reconstruct_x0_diff(xt, t, eps_hat, schedule)
            reg_terms.append(regularization_loss(x0, x0_hat, t, schedule))
            ts.append(t)
            lams.append(lambda_weight(t, schedule.T))
            drops.append(dropped)
        inv = 1.0 / len(batch)
        L_eps = T.scale(_sum(eps_terms), inv)
        L_reg = T.scale(_sum(reg_terms), inv)
        loss = T.add(L_eps, T.scale(L_reg, config.rho))
        _finish_step(params, state, tape, loss)
    return StepLog(epoch=epoch, step=step, L_eps=L_eps.item(),
                   L_reg=L_reg.item(), L_theta=loss.item(),
                   t_drawn=ts, lambda_drawn=lams, dropped=drops)


def train_step_upsampler(params, state: AdamState,
                         batch: list[tuple[np.ndarray, np.ndarray, ConditionEmbedding]],
                         config: TrainConfig, schedule: NoiseSchedule,
                         rng: np.random.Generator, epoch: int = 0,
                         step: int = 0) -> StepLog:
    """Upsampler step: batch of (x0 (N,3), lowres (K,3), embedding).
    The first K positions are replaced by the clean low-res cloud before
    the model call and excluded from the noise loss."""
    if not batch:
        raise ValueError("empty batch")
    ts, lams, drops = [], [], []
    with T.Tape() as tape:
        eps_terms, reg_terms = [], []
        for x0, lowres, emb in batch:
            N = x0.shape[0]
            K = lowres.shape[0]
            if N <= K:
                raise ValueError(f"N={N} must exceed K={K}")
            t = int(rng.integers(1, schedule.T + 1))
            eps = rng.standard_normal(x0.shape)
            dropped = bool(rng.random() < config.drop_prob) or emb.dropped
            z_I = None if dropped else emb.values
            xt = forward_noise(x0, t, eps, schedule)
            xt[:K] = lowres
            eps_hat = denoise_graph(params, xt, t, z_I)
            noisy_rows = np.arange(K, N)
            eps_hat_noisy = T.gather_rows(eps_hat, noisy_rows)
            eps_terms.append(T.mse(T.leaf(eps[K:]), eps_hat_noisy))
            x0_hat = reconstruct_x0_diff(xt, t, eps_hat, schedule)
            reg_terms.append(regularization_loss(x0, x0_hat, t, schedule))
            ts.append(t)
            lams.append(lambda_weight(t, schedule.T))
            drops.append(dropped)
        inv = 1.0 / len(batch)
        L_eps = T.scale(_sum(eps_terms), inv)
        L_reg = T.scale(_sum(reg_terms), inv)
        loss = T.add(L_eps, T.scale(L_reg, config.rho))
        _finish_step(params, state, tape, loss)
    return StepLog(epoch=epoch, step=step, L_eps=L_eps.item(),
                   L_reg=L_reg.item(), L_theta=loss.item(),
                   t_drawn=ts, lambda_drawn=lams, dropped=drops)


def _sum(terms: list[T.DiffTensor]) -> T.DiffTensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


# ------------------------------------------------------------- stage runner


class StageDependencyError(RuntimeError):
    pass


STAGES = ("autoencoder", "base", "upsampler")


def _stage_ckpt(out_dir: Path, stage: str) -> Path:
    return out_dir / f"{stage}.bdif"


def _load_dataset(dataset_dir: Path, split: str) -> list[dict]:
    manifest = DatasetManifest.load(dataset_dir / "manifest.json")
    rows = []
    for e in manifest.entries:
        if e["split"] != split:
            continue
        rows.append({
            "id": e["id"],
            "spec": e["spec"],
            "cloud_path": dataset_dir / e["cloud"],
            "silhouette_path": dataset_dir / e["silhouette"],
        })
    return rows


class _DirLock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"checkpoint directory {self.path.parent} is locked by another run")
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _save_training_state(path: Path, params, state: AdamState, epoch: int,
                         rng: np.random.Generator, config: TrainConfig):
    blob = dict(params)
    for name in params:
        blob[f"opt.m.{name}"] = state.m[name]
        blob[f"opt.v.{name}"] = state.v[name]
    blob["opt.step"] = np.array(float(state.step_count))
    blob["opt.epoch"] = np.array(float(epoch))
    save_params(path, blob)
    sidecar = {"rng_state": rng.bit_generator.state, "epoch": epoch}
    with open(path.with_suffix(".rng.json"), "w") as fh:
        json.dump(sidecar, fh)
    config.save(path.with_suffix(".config"))


def _load_training_state(path: Path, lr: float):
    blob = load_params(path)
    params = {k: v for k, v in blob.items() if not k.startswith("opt.")}
    for p in params.values():
        p.requires_grad = True
    state = AdamState(params, lr=lr)
    for name in params:
        state.m[name] = blob[f"opt.m.{name}"].data
        state.v[name] = blob[f"opt.v.{name}"].data
    state.step_count = int(blob["opt.step"].item())
    epoch = int(blob["opt.epoch"].item())
    with open(path.with_suffix(".rng.json")) as fh:
        sidecar = json.load(fh)
    rng = np.random.default_rng()
    rng.bit_generator.state = sidecar["rng_state"]
    return params, state, epoch, rng


def prepare_base_data(dataset_dir: Path, config: TrainConfig,
                      ae_params) -> list[tuple[np.ndarray, ConditionEmbedding]]:
    data = []
    for row in _load_dataset(Path(dataset_dir), "train"):
        cloud = load_bpc(row["cloud_path"])
        sub_rng = np.random.default_rng(config.seed ^ zlib.crc32(row["id"].encode()))
        idx = sub_rng.choice(cloud.count, size=config.K, replace=False)
        emb = encode(ae_params, load_pgm(row["silhouette_path"]))
        data.append((cloud.points[idx], emb))
    return data


def prepare_upsampler_data(dataset_dir: Path, config: TrainConfig, ae_params):
    data = []
    for row in _load_dataset(Path(dataset_dir), "train"):
        cloud = load_bpc(row["cloud_path"])
        sub_rng = np.random.default_rng(config.seed ^ zlib.crc32(row["id"].encode()))
        idx = sub_rng.choice(cloud.count, size=config.N, replace=False)
        x0 = cloud.points[idx]
        lowres = farthest_point_sample(PointCloud(x0), config.K,
                                       seed=config.seed + 1).points
        emb = encode(ae_params, load_pgm(row["silhouette_path"]))
        data.append((x0, lowres, emb))
    return data


def run_training(dataset_dir, config: TrainConfig, stage: str, out_dir,
                 resume: bool = False, log_fn=None) -> Path:
    """Train one stage to completion; returns the checkpoint path.

    Diffusion stages require the frozen auto-encoder checkpoint; the
    upsampler additionally requires the base checkpoint to exist (pipeline
    ordering). Checkpoints are written every config.checkpoint_interval
    epochs and capture optimizer and RNG state for bitwise resumption.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = _stage_ckpt(out_dir, stage)
    log_path = out_dir / f"{stage}.log.jsonl"

    with _DirLock(out_dir):
        if stage == "autoencoder":
            images = [load_pgm(r["silhouette_path"])
                      for r in _load_dataset(dataset_dir, "train")]
            params = train_autoencoder(
                images, epochs=config.epochs_ae, lr=config.lr, d=config.d,
                seed=config.seed, log_fn=log_fn)
            save_params(ckpt, params)
            config.save(ckpt.with_suffix(".config"))
            return ckpt

        ae_ckpt = _stage_ckpt(out_dir, "autoencoder")
        if not ae_ckpt.exists():
            raise StageDependencyError(
                f"stage {stage!r} requires the 'autoencoder' checkpoint at {ae_ckpt}")
        ae_params = load_params(ae_ckpt, requires_grad=False)

        if stage == "upsampler" and not _stage_ckpt(out_dir, "base").exists():
            raise StageDependencyError(
                f"stage 'upsampler' requires the 'base' checkpoint first")

        if stage == "base":
            schedule = linear_beta_schedule(config.T, config.beta_1,
                                            config.beta_T, config.sigma_mode)
            data = prepare_base_data(dataset_dir, config, ae_params)
            step_fn = train_step_base
            epochs = config.epochs_base
        else:
            schedule = linear_beta_schedule(config.T_upsampler, config.beta_1,
                                            config.beta_T, config.sigma_mode)
            data = prepare_upsampler_data(dataset_dir, config, ae_params)
            step_fn = train_step_upsampler
            epochs = config.epochs_upsampler

        if resume and ckpt.exists():
            params, state, start_epoch, rng = _load_training_state(ckpt, config.lr)
        else:
            dcfg = DenoiserConfig(d=config.d)
            params = init_denoiser_params(dcfg, seed=config.seed)
            state = AdamState(params, lr=config.lr)
            rng = np.random.default_rng(config.seed + {"base": 10, "upsampler": 20}[stage])
            start_epoch = 0

        step = 0
        with open(log_path, "a") as logfh:
            for epoch in range(start_epoch, epochs):
                order = rng.permutation(len(data))
                for s in range(0, len(order), config.batch_size):
                    batch = [data[int(i)] for i in order[s:s + config.batch_size]]
                    log = step_fn(params, state, batch, config, schedule, rng,
                                  epoch=epoch, step=step)
                    logfh.write(log.to_json() + "\n")
                    if log_fn is not None:
                        log_fn(epoch, log.L_theta)
                    step += 1
                if (epoch + 1) % config.checkpoint_interval == 0 or epoch + 1 == epochs:
                    _save_training_state(ckpt, params, state, epoch + 1, rng, config)
        if not ckpt.exists():
            _save_training_state(ckpt, params, state, epochs, rng, config)
    return ckpt
