"""
Training objective, mini-batch loop and checkpoints.

The objective adds a soft-IoU segmentation term on ``sigmoid(T_K)`` to a
``tau``-weighted mean squared reconstruction error between ``D_K`` and the
input image.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import (
    AdamState,
    ConfigMismatchError,
    NumericalError,
    Tensor,
    adam_step,
    poly_lr,
    read_container,
    write_container,
)
from .data import DatasetSample, stack_batch
from .model import ModelConfig, RPCANet

log = logging.getLogger(__name__)

SMOOTH = 1.0
HISTORY_FIELDS = ("epoch", "iter", "lr", "loss_total", "loss_seg", "loss_fid")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def soft_iou_loss(logits: Tensor, mask, smooth: float = SMOOTH) -> Tensor:
    """``1 - mean_i (I_i + s) / (U_i + s)`` with soft counts from ``sigmoid(logits)``."""
    mask = _as_tensor(mask)
    p = logits.sigmoid()
    axes = tuple(range(1, logits.ndim))
    inter = (p * mask).sum(axis=axes)
    union = p.sum(axis=axes) + mask.sum(axis=axes) - inter
    return 1.0 - ((inter + smooth) / (union + smooth)).mean()


def fidelity_loss(recon: Tensor, image) -> Tensor:
    """Batch mean of per-image ``||recon - image||_F^2 / pixels``."""
    image = _as_tensor(image)
    axes = tuple(range(1, recon.ndim))
    diff = recon - image
    pixels = int(np.prod(recon.shape[1:]))
    return ((diff * diff).sum(axis=axes) * (1.0 / pixels)).mean()


def total_loss(logits: Tensor, mask, recon: Tensor, image, tau: float = 0.01) -> Tensor:
    return soft_iou_loss(logits, mask) + tau * fidelity_loss(recon, image)


def loss_parts(logits, mask, recon, image, tau: float = 0.01) -> tuple[Tensor, Tensor, Tensor]:
    seg = soft_iou_loss(logits, mask)
    fid = fidelity_loss(recon, image)
    return seg + tau * fid, seg, fid


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 8
    base_lr: float = 1e-4
    poly_power: float = 0.9
    tau: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0 or self.tau < 0:
            raise ValueError("base_lr must be positive and tau non-negative")
        if self.poly_power != 0.9:
            raise ValueError("poly_power is fixed at 0.9")


@dataclass
class TrainState:
    """Everything needed to continue a run: optimizer moments and position."""

    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimizer steps


@dataclass
class HistoryRow:
    epoch: int
    iter: int
    lr: float
    loss_total: float
    loss_seg: float
    loss_fid: float


class TrainingDivergedError(NumericalError):
    pass


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for ``epoch``; depends only on (seed, epoch) so resumed runs match."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train(
    model: RPCANet,
    data: list[DatasetSample],
    cfg: TrainConfig,
    progress: Callable[[HistoryRow], None] | None = None,
    state: TrainState | None = None,
    max_steps: int | None = None,
) -> tuple[RPCANet, list[HistoryRow], TrainState]:
    """
    Run Adam with a per-iteration poly schedule until ``cfg.epochs`` complete.

    Pass a ``state`` from :func:`load_checkpoint` to resume. ``max_steps``
    stops early after that many optimizer steps in this call (the schedule
    still spans the full ``cfg.epochs``).
    """
    if not data:
        raise ValueError("training data is empty")
    state = state or TrainState(adam=AdamState(base_lr=cfg.base_lr))
    params = model.named_parameters()
    n = len(data)
    per_epoch = batches_per_epoch(n, cfg.batch_size)
    total_iter = cfg.epochs * per_epoch
    history: list[HistoryRow] = []
    model.train()

    for epoch in range(state.epoch, cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        for b in range(per_epoch):
            if epoch * per_epoch + b < state.step:
                continue  # already done before a mid-epoch resume
            if max_steps is not None and len(history) >= max_steps:
                return model, history, state
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            images, masks = stack_batch([data[i] for i in idx])
            x = Tensor(images)
            logits, recon = model(x)
            loss, seg, fid = loss_parts(logits, masks, recon, x, cfg.tau)
            values = (loss.item(), seg.item(), fid.item())
            if not np.all(np.isfinite(values)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {b}: "
                    f"total={values[0]} seg={values[1]} fid={values[2]}"
                )
            loss.backward()
            lr = poly_lr(cfg.base_lr, state.step, total_iter, cfg.poly_power)
            adam_step(params, state.adam, lr)
            state.step += 1
            row = HistoryRow(epoch, state.step, lr, *values)
            history.append(row)
            if progress is not None:
                progress(row)
        state.epoch = epoch + 1
        if cfg.checkpoint_every and cfg.checkpoint_dir and state.epoch % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"epoch_{state.epoch:04d}.ckpt"
            save_checkpoint(path, model, state, cfg)
            log.info("checkpoint %s", path)
    return model, history, state


def write_history(rows: list[HistoryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for r in rows:
            writer.writerow([r.epoch, r.iter, repr(r.lr), repr(r.loss_total), repr(r.loss_seg), repr(r.loss_fid)])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [
            HistoryRow(int(r["epoch"]), int(r["iter"]), *(float(r[k]) for k in HISTORY_FIELDS[2:]))
            for r in csv.DictReader(fh)
        ]


def save_checkpoint(path, model: RPCANet, state: TrainState, cfg: TrainConfig | None = None) -> None:
    """Parameters, BN statistics, Adam moments and position in one container file."""
    adam = state.adam
    header = {
        "model_config": model.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "adam": {
            "step_count": adam.step_count,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "base_lr": adam.base_lr,
        },
        # the checkpoint directory is an output location, not a training setting
        "train_config": {k: v for k, v in asdict(cfg).items() if k != "checkpoint_dir"} if cfg else None,
    }
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam.m.{k}": v for k, v in adam.first_moment.items()})
    tensors.update({f"adam.v.{k}": v for k, v in adam.second_moment.items()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_container(path, header, tensors)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[RPCANet, TrainState, dict]:
    """
    Rebuild the model and training state stored at ``path``.

    Raises ``ConfigMismatchError`` when ``expected_config`` differs from the
    stored one. Returns ``(model, state, header)``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, tensors = read_container(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expected_config is not None and expected_config != config:
        raise ConfigMismatchError(f"{path} holds {config}, expected {expected_config}")
    model = RPCANet(config, seed=0)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    a = header["adam"]
    adam = AdamState(
        first_moment={k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")},
        second_moment={k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        step_count=int(a["step_count"]),
        beta1=a["beta1"],
        beta2=a["beta2"],
        epsilon=a["epsilon"],
        base_lr=a["base_lr"],
    )
    return model, TrainState(adam=adam, epoch=int(header["epoch"]), step=int(header["step"])), header
