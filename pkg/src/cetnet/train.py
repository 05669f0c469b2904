"""Desk-scale training: data, schedule, loss, optimiser and the loop."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .errors import ConfigurationError, FormatError, NumericError, UsageError
from .model import Model, ModelConfig, build_model
from .tensor import Tensor, backward, no_grad

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Training hyper-parameters. ``steps`` is the number of optimiser updates."""

    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 20
    min_lr: float = 1e-5
    label_smoothing: float = 0.0
    seed: int = 0
    data: str = ""
    model_config: str = ""
    checkpoint_dir: str = ""
    checkpoint_every: int = 0
    log_path: str = ""
    hflip: bool = True
    grad_clip: float | None = None
    eval_every_epochs: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigurationError(f"warmup_steps ({self.warmup_steps}) must be in [0, steps={self.steps})")
        if not self.lr > 0:
            raise ConfigurationError(f"peak lr must be positive, got {self.lr}")
        if not 0 <= self.min_lr <= self.lr:
            raise ConfigurationError(f"min_lr must lie in [0, lr], got {self.min_lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive when set")
        if self.checkpoint_every < 0 or self.eval_every_epochs < 0:
            raise ConfigurationError("cadences must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.steps

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        if not isinstance(d, dict):
            raise ConfigurationError("train config must be a JSON object")
        cfg = cls.from_dict(d)
        base = Path(path).parent
        for key in ("data", "model_config", "checkpoint_dir", "log_path"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(base / value))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ----------------------------------------------------------------------------
# schedule, loss, optimiser
# ----------------------------------------------------------------------------

def cosine_warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over ``warmup_steps``, then cosine decay to ``min_lr`` at ``steps``."""
    total, warm = cfg.total_steps, cfg.warmup_steps
    if step < 0 or step > total:
        raise UsageError(f"step {step} outside schedule range [0, {total}]")
    if step < warm:
        return cfg.lr * step / warm
    progress = (step - warm) / (total - warm)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0


def cross_entropy_smoothed(logits: Tensor, labels, eps: float = 0.0) -> Tensor:
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise UsageError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise UsageError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must be integers in [0, {k})")
    if not 0 <= eps < 1:
        raise UsageError(f"smoothing must be in [0, 1), got {eps}")
    target = np.full((n, k), eps / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - eps
    logp = ops.log_softmax(logits, axis=1)
    return ops.mul(ops.sum(ops.mul(logp, Tensor(target, dtype=logits.dtype))), -1.0 / n)


def adamw_step(params, grads, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, wd: float = 0.0, names=None, decay_mask=None):
    """One in-place AdamW update of the arrays in ``params``.

    ``state`` holds ``t``, ``m`` and ``v``; it is initialised on first use.
    Weight decay is decoupled: ``p *= 1 - lr * wd`` before the Adam step.
    ``decay_mask`` (one bool per parameter) limits which arrays decay.
    """
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    names = names or [f"param{i}" for i in range(len(params))]
    for p, g, m, name in zip(params, grads, state["m"], names):
        if m.shape != p.shape or g.shape != p.shape:
            raise UsageError(f"{name}: state/gradient shape does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state["m"][i], state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if wd and (decay_mask is None or decay_mask[i]):
            p *= 1.0 - lr * wd
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return params, state


def _decays(name: str, p: Tensor) -> bool:
    return p.ndim >= 2 and "relative_position_bias_table" not in name


class AdamW:
    """AdamW over a model's named parameters; norms, biases and position tables skip decay."""

    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.named = list(named_params)
        self.wd, self.betas, self.eps = weight_decay, betas, eps
        self.mask = [_decays(n, p) for n, p in self.named]
        self.state: dict = {}

    def step(self, lr: float):
        params = [p.data for _, p in self.named]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.named]
        adamw_step(params, grads, self.state, lr, *self.betas, self.eps, self.wd,
                   names=[n for n, _ in self.named], decay_mask=self.mask)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# ----------------------------------------------------------------------------
# dataset: u32 count, then per record u8 label + CHW u8 pixels
# ----------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, S, S) uint8
    labels: np.ndarray  # (N,) uint8

    def __len__(self):
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.images.shape[-1]


def write_dataset(path, images: np.ndarray, labels: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
        raise ConfigurationError(f"images must be (N, 3, S, S), got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ConfigurationError("one label per image required")
    n = images.shape[0]
    rec = np.empty((n, 1 + images[0].size), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", n))
        f.write(rec.tobytes())


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("dataset shorter than its count header", 0)
    n = struct.unpack("<I", data[:4])[0]
    body = len(data) - 4
    if n == 0:
        if body:
            raise FormatError("empty dataset followed by extra bytes", 4)
        return Dataset(np.zeros((0, 3, 0, 0), np.uint8), np.zeros(0, np.uint8))
    if body % n:
        raise FormatError(f"{body} payload bytes do not split into {n} records", 4)
    pixels = body // n - 1
    side = math.isqrt(pixels // 3) if pixels > 0 else 0
    if side < 1 or 3 * side * side != pixels:
        raise FormatError(f"record size {pixels + 1} is not 1 + 3*S*S", 4)
    rec = np.frombuffer(data, dtype=np.uint8, offset=4).reshape(n, 1 + pixels)
    return Dataset(rec[:, 1:].reshape(n, 3, side, side).copy(), rec[:, 0].copy())


def synthetic_dataset(count: int = 64, classes: int = 10, size: int = 32, seed: int = 0, noise: float = 40.0):
    """Per-class random prototype plus Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 255, (classes, 3, size, size))
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    imgs = protos[labels] + rng.normal(0, noise, (count, 3, size, size))
    return Dataset(np.clip(np.rint(imgs), 0, 255).astype(np.uint8), labels.astype(np.uint8))


def preprocess(images: np.ndarray, flip_mask=None) -> np.ndarray:
    """uint8 CHW -> normalised float32, optionally mirroring flagged samples."""
    x = images.astype(np.float32) / 255.0
    x = (x - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]
    if flip_mask is not None and flip_mask.any():
        x[flip_mask] = x[flip_mask][..., ::-1]
    return np.ascontiguousarray(x, dtype=np.float32)


# ----------------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------------

def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy in eval mode."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            x = Tensor(preprocess(dataset.images[i:i + batch_size]))
            pred = model(x).data.argmax(axis=1)
            correct += int(np.sum(pred == dataset.labels[i:i + batch_size]))
    model.train(was_training)
    return correct / len(dataset)


@dataclass
class TrainResult:
    model: Model
    metrics: list
    final_accuracy: float


def _dump_nan(cfg: TrainConfig, step, lr, loss, batch_idx, model):
    dump = {
        "step": step, "lr": lr, "loss": repr(loss), "batch_indices": [int(i) for i in batch_idx],
        "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()},
    }
    target = Path(cfg.checkpoint_dir or ".") / "nan_dump.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(dump, indent=1))
    return target


def train(cfg: TrainConfig, model_cfg: ModelConfig | None = None, dataset: Dataset | None = None) -> TrainResult:
    """Run ``cfg.steps`` AdamW updates and return the model and its metrics log.

    Records: ``{"step", "loss", "lr"}`` after every update and
    ``{"epoch", "train_acc"}`` (running accuracy of the epoch's training
    batches) at each epoch end, plus ``"eval_acc"`` every
    ``eval_every_epochs``. Written as JSON lines to ``log_path`` when set.
    """
    if model_cfg is None:
        if not cfg.model_config:
            raise ConfigurationError("no model config given")
        model_cfg = ModelConfig.load(cfg.model_config)
    if dataset is None:
        if not cfg.data:
            raise ConfigurationError("no dataset given")
        dataset = read_dataset(cfg.data)
    n = len(dataset)
    if n == 0:
        raise UsageError("dataset is empty")
    if int(dataset.labels.max()) >= model_cfg.num_classes:
        raise ConfigurationError("dataset has labels beyond the model's num_classes")

    model = build_model(model_cfg, seed=cfg.seed).train()
    opt = AdamW(model.named_parameters(), cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    log = open(cfg.log_path, "w") if cfg.log_path else None
    if cfg.checkpoint_dir:
        Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    metrics = []

    def emit(rec):
        metrics.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
            log.flush()

    step, epoch = 0, 0
    try:
        while step < cfg.steps:
            order = rng.permutation(n)
            flips = rng.random(n) < 0.5 if cfg.hflip else np.zeros(n, dtype=bool)
            correct = seen = 0
            for start in range(0, n, cfg.batch_size):
                if step >= cfg.steps:
                    break
                idx = order[start:start + cfg.batch_size]
                x = Tensor(preprocess(dataset.images[idx], flips[idx]))
                y = dataset.labels[idx].astype(np.int64)
                model.zero_grad()
                logits = model(x)
                loss = cross_entropy_smoothed(logits, y, cfg.label_smoothing)
                lr = cosine_warmup_lr(step + 1, cfg)
                if not np.isfinite(loss.item()):
                    where = _dump_nan(cfg, step + 1, lr, loss.item(), idx, model)
                    raise NumericError(f"loss became non-finite at step {step + 1}; diagnostics in {where}")
                backward(loss)
                if cfg.grad_clip is not None:
                    clip_grad_norm(model.parameters(), cfg.grad_clip)
                opt.step(lr)
                step += 1
                correct += int(np.sum(logits.data.argmax(axis=1) == y))
                seen += len(idx)
                emit({"step": step, "loss": loss.item(), "lr": lr})
                if cfg.checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(model, Path(cfg.checkpoint_dir) / f"step{step:06d}.cetn")
            epoch += 1
            rec = {"epoch": epoch, "train_acc": correct / max(seen, 1)}
            if cfg.eval_every_epochs and epoch % cfg.eval_every_epochs == 0:
                rec["eval_acc"] = evaluate(model, dataset, cfg.batch_size)
                model.train()
            emit(rec)
        final = evaluate(model, dataset, cfg.batch_size)
        emit({"final_eval_acc": final})
        if cfg.checkpoint_dir:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / "final.cetn")
    finally:
        if log is not None:
            log.close()
    return TrainResult(model, metrics, final)
