"""Single-step supervised training with adaptive-moment updates.

One optimizer step works on a batch of window samples: the diffusion
objective draws a noise level and noise per sample and regresses the
velocity target; the ``direct`` objective (the diffusion-disabled ablation
arm) regresses the clean states with zeroed state channels and tau = 0.
Gradients are clipped by global norm.  Everything is driven by one seed:
batch order, noise draws and validation are reproducible bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .dataset import TrafficDataset, TrainingSample, WindowSpec
from .diffusion import DiffusionSchedule, diffusion_loss_batch, refine_batch
from .errors import ConfigError, NumericError
from .lwr import SimConfig
from .model import DetnoModel


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.98
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 10
    objective: str = "diffusion"   # or "direct" (diffusion disabled)
    anchor_stride: int = 1         # use every n-th window anchor
    n_eval_windows: int = 16       # held-out windows scored per evaluation

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.objective not in ("diffusion", "direct"):
            raise ConfigError(f"unknown objective {self.objective!r}")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float
    lr: float
    wall_seconds: float


@dataclass
class TrainResult:
    metrics: list[MetricsRow] = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_mse,val_mae,lr,wall_seconds\n")
            for row in self.metrics:
                fh.write(f"{row.epoch},{row.train_loss:.8g},{row.val_mse:.8g},"
                         f"{row.val_mae:.8g},{row.lr:.8g},{row.wall_seconds:.3f}\n")


class Adam:
    """Adaptive moment estimation with bias correction and global-norm clip."""

    def __init__(self, store, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: float = 1.0):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def clip_gradients(self) -> float:
        """Scale all gradients so their global norm is at most grad_clip."""
        total = 0.0
        for name, p in self.store.items():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = np.sqrt(total)
        if norm > self.grad_clip:
            scale = self.grad_clip / norm
            for name, p in self.store.items():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def stack_batch(samples: list[TrainingSample]):
    sensors = np.stack([s.sensors for s in samples])
    coords = np.stack([s.queries for s in samples])
    targets = np.stack([s.targets for s in samples])
    return sensors, coords, targets


def direct_loss_batch(model, sensors, coords, targets) -> Tensor:
    """Plain state regression used by the diffusion-disabled variant."""
    queries = np.concatenate([coords, np.zeros_like(coords)], axis=-1)
    pred = model.forward_batch(sensors, queries, np.zeros(sensors.shape[0]))
    diff = pred - Tensor(targets.astype(pred.data.dtype))
    return (diff * diff).mean()


def predict_direct(model, sensors: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Single-forward prediction of the diffusion-disabled variant."""
    queries = np.concatenate([coords, np.zeros_like(coords)], axis=-1)
    with no_grad():
        out = model.forward_batch(sensors, queries, np.zeros(sensors.shape[0]))
    return out.data.astype(np.float64)


def evaluate_single_step(model, samples: list[TrainingSample],
                         schedule: DiffusionSchedule, objective: str,
                         rng: np.random.Generator) -> tuple[float, float]:
    """Held-out MSE/MAE of refined (or direct) predictions at sample queries."""
    if not samples:
        return float("nan"), float("nan")
    sensors, coords, targets = stack_batch(samples)
    if objective == "diffusion":
        pred = refine_batch(model, sensors, coords, schedule, rng)
    else:
        pred = predict_direct(model, sensors, coords)
    err = pred - targets
    return float((err ** 2).mean()), float(np.abs(err).mean())


def train(model: DetnoModel, dataset: TrafficDataset, schedule: DiffusionSchedule,
          sim_config: SimConfig, spec: WindowSpec, cfg: TrainConfig,
          checkpoint_path: str | None = None,
          log: bool = False) -> TrainResult:
    """Train on the dataset's train split; returns the per-epoch metrics."""
    samples = dataset.samples("train", sim_config, spec, seed=cfg.seed,
                              anchor_stride=cfg.anchor_stride)
    if not samples:
        raise ConfigError("train split produced no window samples")
    val_samples = dataset.samples("test", sim_config, spec, seed=cfg.seed + 1,
                                  anchor_stride=cfg.anchor_stride)
    val_samples = val_samples[:cfg.n_eval_windows]

    optimizer = Adam(model.store, lr=cfg.lr, grad_clip=cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            sensors, coords, targets = stack_batch(batch)
            model.store.zero_grad()
            if cfg.objective == "diffusion":
                loss, k_drawn = diffusion_loss_batch(model, sensors, coords,
                                                     targets, schedule, rng)
            else:
                loss = direct_loss_batch(model, sensors, coords, targets)
                k_drawn = None
            value = float(loss.data)
            if not np.isfinite(value):
                norms = {n: float(np.abs(p.data).max())
                         for n, p in list(model.store.items())[:4]}
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {n_batches} "
                    f"(k={k_drawn}, head param norms {norms})")
            loss.backward()
            optimizer.clip_gradients()
            optimizer.step()
            epoch_loss += value
            n_batches += 1
        optimizer.lr *= cfg.lr_decay

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            val_mse, val_mae = evaluate_single_step(
                model, val_samples, schedule, cfg.objective,
                np.random.default_rng(cfg.seed + epoch))
            row = MetricsRow(epoch=epoch, train_loss=epoch_loss / max(n_batches, 1),
                             val_mse=val_mse, val_mae=val_mae, lr=optimizer.lr,
                             wall_seconds=time.perf_counter() - started)
            result.metrics.append(row)
            if log:
                print(f"epoch {row.epoch:4d}  loss {row.train_loss:.5f}  "
                      f"val_mse {row.val_mse:.5f}  ({row.wall_seconds:.0f}s)")
            if checkpoint_path is not None:
                model.save_checkpoint(checkpoint_path)
    return result
