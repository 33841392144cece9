"""Target training, evaluation and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .nets import build_network
from .target import TargetModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "miaudit-checkpoint/1"


class EmptyDatasetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    early_stopping: bool = False
    patience: int = 5
    checkpoint_every: int = 1
    seed: int = 0
    lr_decay: float = 1.0  # multiplicative learning-rate factor applied after every epoch

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


def evaluate_target(model: TargetModel, members: LabeledDataset,
                    nonmembers: LabeledDataset | None = None) -> dict:
    """Accuracy and mean loss on the member (train) and nonmember (test) splits."""
    out = {}
    for key, ds in (("train", members), ("test", nonmembers)):
        if ds is None or len(ds) == 0:
            out[f"{key}_accuracy"] = None
            out[f"{key}_loss"] = None
            continue
        if ds.labels.max() >= model.n_classes:
            raise ValueError(
                f"{key} split has labels up to {ds.labels.max()} but the model has {model.n_classes} classes")
        logits = model.logits(ds.inputs)
        out[f"{key}_accuracy"] = float(np.mean(logits.argmax(axis=1) == ds.labels))
        lse = np.logaddexp.reduce(logits, axis=1)
        out[f"{key}_loss"] = float(np.mean(lse - logits[np.arange(len(ds)), ds.labels]))
    return out


def _n_classes(data: LabeledDataset, test_data: LabeledDataset | None) -> int:
    top = data.labels.max()
    if test_data is not None and len(test_data):
        top = max(top, test_data.labels.max())
    return int(top) + 1


def train_target(arch_spec: str, data: LabeledDataset, cfg: TrainConfig,
                 test_data: LabeledDataset | None = None, checkpoint_dir=None,
                 n_classes: int | None = None, arch_kwargs: dict | None = None):
    """Train a registered architecture on the member split.

    Returns ``(model, checkpoints)`` where ``checkpoints`` lists saved paths
    (epoch 0 plus every ``checkpoint_every`` epochs plus the final epoch).
    ``model.history`` holds one metrics dict per epoch, epoch 0 included.
    """
    if len(data) == 0:
        raise EmptyDatasetError("member split is empty")
    n_classes = n_classes or _n_classes(data, test_data)
    data.check_classes(n_classes)
    torch.manual_seed(cfg.seed)
    net = build_network(arch_spec, data.input_shape, n_classes, **(arch_kwargs or {}))
    model = TargetModel(net, arch_spec, n_classes, data.input_shape, arch_kwargs, epoch=0)

    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=0.9)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = torch.from_numpy(data.inputs)
    y_all = torch.from_numpy(data.labels)

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    saved = []

    def record(epoch):
        metrics = evaluate_target(model, data, test_data)
        model.epoch = epoch
        model.history.append({"epoch": epoch, **metrics})
        log.info("epoch %d: train_acc=%.4f test_acc=%s", epoch, metrics["train_accuracy"],
                 metrics["test_accuracy"])
        return metrics

    def checkpoint():
        if checkpoint_dir is not None:
            path = checkpoint_dir / f"epoch_{model.epoch:04d}.npz"
            save_checkpoint(model, path)
            saved.append(path)

    record(0)
    checkpoint()
    best, stale = math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = torch.randperm(len(data), generator=gen)
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch offset {start}; "
                    f"try a smaller learning_rate than {cfg.learning_rate}")
            loss.backward()
            opt.step()
        sched.step()
        net.eval()
        model.invalidate()
        metrics = record(epoch)
        last = epoch == cfg.epochs
        monitor = metrics["test_loss"] if metrics["test_loss"] is not None else metrics["train_loss"]
        if monitor < best - 1e-6:
            best, stale = monitor, 0
        else:
            stale += 1
        stop = cfg.early_stopping and stale >= cfg.patience
        if epoch % cfg.checkpoint_every == 0 or last or stop:
            checkpoint()
        if stop:
            log.info("early stopping at epoch %d", epoch)
            break
    return model, saved


def _meta(model: TargetModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "architecture_id": model.architecture_id,
        "arch_kwargs": model.arch_kwargs,
        "n_classes": model.n_classes,
        "input_shape": list(model.input_shape),
        "epoch": model.epoch,
        "history": model.history,
    }


def checkpoint_hash(model: TargetModel) -> str:
    """Content hash over metadata and parameters; independent of file encoding."""
    h = hashlib.sha256()
    h.update(json.dumps(_meta(model), sort_keys=True).encode())
    h.update(np.ascontiguousarray(model.flat_parameters(), dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(model: TargetModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, params=model.flat_parameters(), meta=np.array(json.dumps(_meta(model), sort_keys=True)))
    return path


def load_checkpoint(path) -> TargetModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        params = z["params"]
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unrecognised checkpoint format {meta.get('format')!r}")
    net = build_network(meta["architecture_id"], meta["input_shape"], meta["n_classes"],
                        **meta["arch_kwargs"])
    net.eval()
    model = TargetModel(net, meta["architecture_id"], meta["n_classes"], meta["input_shape"],
                        meta["arch_kwargs"], meta["epoch"], meta["history"])
    model.set_flat_parameters(params)
    return model


def list_checkpoints(directory) -> list[Path]:
    return sorted(Path(directory).glob("epoch_*.npz"))
