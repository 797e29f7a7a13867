"""SGD with momentum and weight decay, the epoch loop with validation-based
model selection, and binary checkpoint round-tripping.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Optional

import numpy as np

from . import metrics
from .data import Manifest, batch_iter
from .errors import CheckpointError, NumericsError, TrainingError
from .model import ModelConfig, TransClawUNet
from .tensor import Tensor, backward, read_array, write_array

_CKPT_MAGIC = b"TCUN"
_OPT_MAGIC = b"OPT1"
CHECKPOINT_VERSION = 1


def default_decay_exempt(name: str) -> bool:
    """Norm affine terms and position embeddings skip weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta", "pos_embed")


class SGD:
    """Momentum SGD: g = grad + wd*theta; v = m*v + g; theta -= lr*v.

    Velocity buffers start at zero, so the first step reduces to
    theta - lr*(grad + wd*theta). ``step`` clears gradients afterwards.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-2,
                 momentum: float = 0.9, weight_decay: float = 1e-4,
                 decay_exempt: Optional[Callable[[str], bool]] = default_decay_exempt):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_exempt = decay_exempt or (lambda name: False)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self) -> None:
        for name, p in self.named_params:
            if p.grad is None:
                raise TrainingError(f"parameter {name!r} has no gradient; "
                                    "run backward before step")
            g = p.grad
            if self.weight_decay and not self.decay_exempt(name):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p.grad = None


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_all_params: bool = False
    eval_every: int = 1  # validation cadence in epochs; metrics repeat between evals


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    val_dice: float
    val_hd: float


@dataclass
class TrainResult:
    history: list[HistoryRow]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_dice: float
    steps: int = 0


def state_dict(model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_tensors()}


def load_state(model, state: dict[str, np.ndarray]) -> None:
    tensors = dict(model.named_tensors())
    missing = set(tensors) - set(state)
    extra = set(state) - set(tensors)
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    for name, arr in state.items():
        t = tensors[name]
        if tuple(arr.shape) != t.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {t.shape}")
        t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)


def history_to_csv(history: list[HistoryRow]) -> str:
    lines = ["epoch,loss,val_dice,val_hd"]
    for row in history:
        lines.append(f"{row.epoch},{row.loss!r},{row.val_dice!r},{row.val_hd!r}")
    return "\n".join(lines) + "\n"


def train_loop(model: TransClawUNet, manifest: Manifest,
               settings: TrainSettings) -> TrainResult:
    """One seeded-shuffle pass per epoch; per batch forward, cross-entropy,
    backward, SGD step. Returns the history and the best-by-validation-Dice
    parameter snapshot.
    """
    from .ops import cross_entropy  # local import keeps module load light

    n_train = len(manifest.splits.get("train", ()))
    if n_train == 0:
        raise TrainingError("training split is empty")
    if settings.batch_size > n_train:
        raise TrainingError(f"batch size {settings.batch_size} exceeds "
                            f"training set size {n_train}")
    val_samples = (manifest.load_split("val") if manifest.splits.get("val")
                   else manifest.load_split("train"))

    exempt = None if settings.decay_all_params else default_decay_exempt
    opt = SGD(list(model.named_parameters()), lr=settings.lr,
              momentum=settings.momentum, weight_decay=settings.weight_decay,
              decay_exempt=exempt)

    history: list[HistoryRow] = []
    best_state = state_dict(model)
    best_epoch = 0
    best_dice = -np.inf
    val_dice = val_hd = float("nan")
    steps = 0

    for epoch in range(1, settings.epochs + 1):
        model.train()
        losses = []
        for images, masks in batch_iter(manifest, "train", settings.batch_size,
                                        settings.seed, epoch):
            try:
                loss = cross_entropy(model(images), masks)
            except NumericsError as e:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {steps + 1}: {e}") from e
            backward(loss)
            opt.step()
            losses.append(loss.item())
            steps += 1

        if epoch % settings.eval_every == 0 or epoch == settings.epochs:
            report = metrics.evaluate(model, val_samples)
            val_dice, val_hd = report.mean_dice, report.mean_ahd
            if np.isfinite(val_dice) and val_dice > best_dice:
                best_dice = val_dice
                best_epoch = epoch
                best_state = state_dict(model)
        history.append(HistoryRow(epoch, float(np.mean(losses)), val_dice, val_hd))

    return TrainResult(history=history, best_state=best_state,
                       best_epoch=best_epoch, best_val_dice=float(best_dice),
                       steps=steps)


# ---------------------------------------------------------------------------
# checkpoint format: magic "TCUN", u32 version, u32 epoch, u64 seed,
# u64 config length + UTF-8 config JSON, u32 tensor count, then per tensor
# (u16 name length, UTF-8 name, standard tensor block); optional optimizer
# section tagged "OPT1".


def _write_named(fp: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fp.write(struct.pack("<H", len(encoded)))
    fp.write(encoded)
    write_array(arr, fp)


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def _read_named(fp: BinaryIO, what: str) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fp, 2, f"{what} name length"))
    name = _read_exact(fp, name_len, f"{what} name").decode("utf-8")
    try:
        arr = read_array(fp)
    except Exception as e:
        raise CheckpointError(f"checkpoint truncated in tensor {name!r}: {e}") from e
    return name, arr


@dataclass
class CheckpointMeta:
    epoch: int
    seed: int
    config: ModelConfig
    optimizer: Optional[dict] = field(default=None)


def write_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray],
                     epoch: int = 0, seed: int = 0,
                     optimizer: Optional[SGD] = None) -> None:
    config_doc = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(_CKPT_MAGIC)
        fp.write(struct.pack("<IIQ", CHECKPOINT_VERSION, epoch, seed))
        fp.write(struct.pack("<Q", len(config_doc)))
        fp.write(config_doc)
        fp.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_named(fp, name, arr)
        if optimizer is None:
            fp.write(struct.pack("<B", 0))
        else:
            fp.write(struct.pack("<B", 1))
            fp.write(_OPT_MAGIC)
            fp.write(struct.pack("<ddd", optimizer.lr, optimizer.momentum,
                                 optimizer.weight_decay))
            fp.write(struct.pack("<I", len(optimizer.velocity)))
            for name, arr in optimizer.velocity.items():
                _write_named(fp, name, arr)


def save_checkpoint(model: TransClawUNet, path, epoch: int = 0, seed: int = 0,
                    optimizer: Optional[SGD] = None) -> None:
    write_checkpoint(path, model.config, dict(model.named_tensors()),
                     epoch=epoch, seed=seed, optimizer=optimizer)


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None
                    ) -> tuple[TransClawUNet, CheckpointMeta]:
    """Rebuild the model stored at ``path``; bitwise round-trip of save.

    ``expect_config``, when given, must match the stored config exactly.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fp:
        magic = _read_exact(fp, 4, "magic")
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, epoch, seed = struct.unpack("<IIQ", _read_exact(fp, 16, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} not supported "
                                  f"(expected {CHECKPOINT_VERSION})")
        (config_len,) = struct.unpack("<Q", _read_exact(fp, 8, "config length"))
        config_doc = _read_exact(fp, config_len, "config document").decode("utf-8")
        try:
            config = ModelConfig.from_dict(json.loads(config_doc))
        except (json.JSONDecodeError, KeyError) as e:
            raise CheckpointError(f"corrupt config document: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(fp, 4, "tensor count"))
        tensors = dict(_read_named(fp, "parameter") for _ in range(count))
        (has_opt,) = struct.unpack("<B", _read_exact(fp, 1, "optimizer flag"))
        optimizer = None
        if has_opt:
            if _read_exact(fp, 4, "optimizer tag") != _OPT_MAGIC:
                raise CheckpointError("bad optimizer section tag")
            lr, momentum, wd = struct.unpack("<ddd", _read_exact(fp, 24, "optimizer hypers"))
            (n_vel,) = struct.unpack("<I", _read_exact(fp, 4, "velocity count"))
            velocity = dict(_read_named(fp, "velocity") for _ in range(n_vel))
            optimizer = {"lr": lr, "momentum": momentum, "weight_decay": wd,
                         "velocity": velocity}

    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise CheckpointError("checkpoint config does not match the expected "
                              "model configuration")
    model = TransClawUNet(config, seed=int(seed))
    load_state(model, tensors)
    return model, CheckpointMeta(epoch=epoch, seed=int(seed), config=config,
                                 optimizer=optimizer)
