"""Optimization machinery: AdamW, warmup + half-cycle cosine schedule,
global gradient clipping, pretraining augmentations, the pretrain and
fine-tune drivers, and binary checkpoint persistence.

Determinism contract: a full training step is a pure function of
(parameters, batch, rng state). Per-sample augmentation streams are keyed
by (seed, epoch, sample index) so data-loading order can never change the
result, and gradient reduction follows a fixed parameter order.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import imgproc
from . import model as M
from . import tensor as T
from .imgproc import NormalizationSpec, promote_rgb, resize_bilinear
from .rng import Rng


class StepOutOfRange(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class CheckpointIncompatible(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_max_norm: float = 1.0


@dataclass
class OptimizerState:
    """AdamW moments. Decay is decoupled (p -= lr * wd * p) and skipped for
    rank-0/1 parameters, which covers biases, layer-norm affines and the
    learnable tokens."""

    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    beta1, beta2 = state.config.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise T.ShapeMismatch(f"grad shape {g.shape} vs param {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if state.config.weight_decay and p.data.ndim >= 2:
            p.data -= lr * state.config.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.config.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Global L2 clipping across all gradients; returns (grads, total_norm).
    Direction is preserved: every gradient is scaled by the same factor."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.001
    total_steps: int = 1
    warmup_fraction: float = 0.10
    batch_size: int = 64
    lr_scaling_reference_batch: int = 64

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / self.lr_scaling_reference_batch

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.total_steps)


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to the peak over the first warmup fraction of steps,
    then half-cycle cosine decay to 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    peak = cfg.peak_lr
    if step < w:
        return peak * step / w
    span = cfg.total_steps - w
    if span == 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


# ---------------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: tuple[float, float] = (0.0, 90.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    crop_scale: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        if not (0 <= self.hflip_p <= 1 and 0 <= self.vflip_p <= 1):
            raise ValueError("flip probabilities must be in [0, 1]")
        if self.rotation_degrees[0] > self.rotation_degrees[1] or self.crop_scale[0] > self.crop_scale[1]:
            raise ValueError("ranges must be ordered")


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    hflip: bool
    vflip: bool
    scale: float  # area scale; > 1 zooms out via reflect pad
    offset_y: float  # crop/pad anchor in [0, 1]
    offset_x: float


def sample_augment_params(cfg: AugmentConfig, rng: Rng) -> AugmentParams:
    return AugmentParams(
        angle=float(rng.uniform(*cfg.rotation_degrees)),
        hflip=bool(rng.random() < cfg.hflip_p),
        vflip=bool(rng.random() < cfg.vflip_p),
        scale=float(rng.uniform(*cfg.crop_scale)),
        offset_y=float(rng.random()),
        offset_x=float(rng.random()),
    )


def _reflect_coords(c: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(c)
    period = 2.0 * (n - 1)
    c = np.abs(c) % period
    return np.where(c > n - 1, period - c, c)


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    sy = _reflect_coords(sy, h)
    sx = _reflect_coords(sx, w)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    ca, sa = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel pulls from rotated source location
    sy = cy + ca * dy + sa * dx
    sx = cx - sa * dy + ca * dx
    return _bilinear_sample(img, sy, sx)


def _resized_crop(img: np.ndarray, scale: float, oy: float, ox: float) -> np.ndarray:
    h, w = img.shape[:2]
    side = math.sqrt(scale)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    if ch <= h and cw <= w:
        top = round(oy * (h - ch))
        left = round(ox * (w - cw))
        window = img[top : top + ch, left : left + cw]
    else:
        pad_y, pad_x = max(ch - h, 0), max(cw - w, 0)
        before_y = round(oy * pad_y)
        before_x = round(ox * pad_x)
        pads = [(before_y, pad_y - before_y), (before_x, pad_x - before_x)]
        if img.ndim == 3:
            pads.append((0, 0))
        window = np.pad(img, pads, mode="reflect")
        window = window[: max(ch, h), : max(cw, w)]
        if ch <= h or cw <= w:  # mixed case: crop the non-padded axis
            top = round(oy * max(h - ch, 0))
            left = round(ox * max(w - cw, 0))
            window = window[top : top + ch, left : left + cw]
    if window.shape[:2] == (h, w):
        return window.copy()
    return resize_bilinear(window, w, h)


def apply_augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotation (bilinear, reflect padding), flips, then area-scaled
    resized crop back to the input resolution. Output dims equal input dims."""
    out = _rotate(np.asarray(img, dtype=float), params.angle)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1, :]
    out = _resized_crop(np.ascontiguousarray(out), params.scale, params.offset_y, params.offset_x)
    return out


def augment(img: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    return apply_augment(img, sample_augment_params(cfg, rng))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"USFM"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4")}


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFile(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"bad checkpoint magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        meta_len = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))[0]
        metadata = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        count = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))[0]
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))[0]
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, f"tensor {name} header"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag} for tensor {name}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"tensor {name} dims"))
            nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if rank else 4
            payload = _read_exact(fh, nbytes, f"tensor {name} payload")
            tensors[name] = np.frombuffer(payload, dtype=_DTYPE_TAGS[tag]).reshape(dims).copy()
    return Checkpoint(metadata=metadata, tensors=tensors, version=version)


def _model_checkpoint(kind: str, cfg: M.ModelConfig, params: dict[str, T.Tensor],
                      step: int, rng: Rng, extra: dict | None = None,
                      opt_state: OptimizerState | None = None) -> Checkpoint:
    tensors = {name: p.data.copy() for name, p in params.items()}
    metadata = {
        "kind": kind,
        "model": cfg.to_dict(),
        "step": step,
        "rng_state": rng.state(),
    }
    if extra:
        metadata.update(extra)
    if opt_state is not None:
        for name, m in opt_state.m.items():
            tensors[f"opt.m.{name}"] = m.copy()
            tensors[f"opt.v.{name}"] = opt_state.v[name].copy()
        metadata["optimizer"] = {
            "step": opt_state.step,
            "betas": list(opt_state.config.betas),
            "eps": opt_state.config.eps,
            "weight_decay": opt_state.config.weight_decay,
        }
    return Checkpoint(metadata=metadata, tensors=tensors)


# ---------------------------------------------------------------------------
# training drivers


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float


def _as_batches(n: int, batch_size: int, order: np.ndarray):
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _prepare_batch(images, indices, epoch: int, master: Rng,
                   augment_cfg: AugmentConfig | None, norm: NormalizationSpec) -> np.ndarray:
    batch = []
    for i in indices:
        img = images[int(i)]
        if augment_cfg is not None:
            r = master.child(1, epoch, int(i))  # keyed per (seed, epoch, sample)
            img = apply_augment(img, sample_augment_params(augment_cfg, r))
        batch.append(imgproc.normalize(promote_rgb(np.clip(img, 0.0, 1.0)), norm))
    return np.stack(batch)


def pretrain(
    model: M.MaePretrainModel,
    images,
    epochs: int,
    seed: int,
    batch_size: int = 16,
    base_lr: float = 0.001,
    optimizer: OptimizerConfig | None = None,
    augment_cfg: AugmentConfig | None = None,
    norm: NormalizationSpec = NormalizationSpec(),
    checkpoint_dir=None,
    include_optimizer: bool = False,
) -> tuple[list[LogRow], Checkpoint]:
    """Self-supervised masked-reconstruction pretraining.

    Per step: augment -> normalize -> masked forward -> backward -> clip ->
    scheduled AdamW update. Two runs with equal seeds produce bitwise-equal
    loss curves. Checkpoints are written at epoch boundaries when
    checkpoint_dir is set; the final checkpoint is always returned.
    """
    images = list(images)
    if not images:
        raise ValueError("pretraining corpus is empty")
    optimizer = optimizer or OptimizerConfig()
    steps_per_epoch = math.ceil(len(images) / batch_size)
    schedule = ScheduleConfig(base_lr=base_lr, total_steps=max(epochs * steps_per_epoch, 1),
                              batch_size=batch_size)
    master = Rng(seed)
    state = OptimizerState(config=optimizer)
    log: list[LogRow] = []
    step = 0
    for epoch in range(epochs):
        order = master.child(0, epoch).permutation(len(images))
        for chunk in _as_batches(len(images), batch_size, order):
            x = _prepare_batch(images, chunk, epoch, master, augment_cfg, norm)
            T.zero_grads(model.params)
            loss, _, _ = M.pretrain_forward(model, x, master.child(2, step), train=True)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NonFiniteLoss(f"loss {loss_val} at step {step}")
            grads = T.backward(loss, model.params)
            grads, _ = clip_grad_norm(grads, optimizer.clip_max_norm)
            lr = lr_at(step, schedule)
            adamw_step(model.params, grads, state, lr)
            log.append(LogRow(step=step, lr=lr, loss=loss_val))
            step += 1
        if checkpoint_dir is not None:
            ckpt = _model_checkpoint("pretrain", model.cfg, model.params, step, master,
                                     opt_state=state if include_optimizer else None)
            save_checkpoint(f"{checkpoint_dir}/epoch_{epoch:04d}.usfm", ckpt)
    final = _model_checkpoint("pretrain", model.cfg, model.params, step, master,
                              opt_state=state if include_optimizer else None)
    return log, final


def write_log_csv(log: list[LogRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for row in log:
            fh.write(f"{row.step},{row.lr!r},{row.loss!r}\n")


def finetune(
    checkpoint: Checkpoint,
    images,
    labels,
    n_classes: int,
    epochs: int,
    seed: int,
    batch_size: int = 16,
    base_lr: float = 0.001,
    optimizer: OptimizerConfig | None = None,
    augment_cfg: AugmentConfig | None = None,
    norm: NormalizationSpec = NormalizationSpec(),
    freeze_encoder: bool = False,
    pooling: str | None = None,
    max_steps: int | None = None,
) -> tuple[M.ClassifierModel, list[LogRow], Checkpoint]:
    """Supervised fine-tuning of a pretrained encoder with a fresh head.

    freeze_encoder=True leaves every encoder tensor bit-identical and
    trains only the head (and class token, when used).
    """
    if checkpoint.metadata.get("kind") not in ("pretrain", "classifier"):
        raise CheckpointIncompatible(f"cannot fine-tune from kind {checkpoint.metadata.get('kind')!r}")
    cfg = M.ModelConfig.from_dict(checkpoint.metadata["model"])
    images = list(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError("images and labels length mismatch")
    if not images:
        raise ValueError("fine-tuning set is empty")
    h, w = np.asarray(images[0]).shape[:2]
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise CheckpointIncompatible(
            f"checkpoint expects {cfg.image_size}x{cfg.image_size} inputs, data is {h}x{w}"
        )
    optimizer = optimizer or OptimizerConfig()
    master = Rng(seed)
    clf = M.ClassifierModel(cfg, n_classes, master.child(3), pooling=pooling)
    clf.load_encoder(checkpoint.tensors)
    if freeze_encoder:
        frozen = set(clf.encoder_param_names())
        trainable = {k: v for k, v in clf.params.items() if k not in frozen}
    else:
        trainable = dict(clf.params)

    steps_per_epoch = math.ceil(len(images) / batch_size)
    total = max(epochs * steps_per_epoch, 1)
    if max_steps is not None:
        total = min(total, max_steps)
    schedule = ScheduleConfig(base_lr=base_lr, total_steps=total, batch_size=batch_size)
    state = OptimizerState(config=optimizer)
    log: list[LogRow] = []
    step = 0
    for epoch in range(epochs):
        if step >= total:
            break
        order = master.child(0, epoch).permutation(len(images))
        for chunk in _as_batches(len(images), batch_size, order):
            if step >= total:
                break
            x = _prepare_batch(images, chunk, epoch, master, augment_cfg, norm)
            y = labels[chunk]
            T.zero_grads(clf.params)
            logits = M.classify_forward(clf, x, train=True, rng=master.child(2, step))
            loss = M.cross_entropy(logits, y)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NonFiniteLoss(f"loss {loss_val} at step {step}")
            grads = T.backward(loss, trainable)
            grads, _ = clip_grad_norm(grads, optimizer.clip_max_norm)
            lr = lr_at(step, schedule)
            adamw_step(trainable, grads, state, lr)
            log.append(LogRow(step=step, lr=lr, loss=loss_val))
            step += 1
    extra = {"n_classes": n_classes, "pooling": clf.pooling}
    final = _model_checkpoint("classifier", cfg, clf.params, step, master, extra=extra)
    return clf, log, final


def classifier_from_checkpoint(ckpt: Checkpoint) -> M.ClassifierModel:
    if ckpt.metadata.get("kind") != "classifier":
        raise CheckpointIncompatible(f"expected a classifier checkpoint, got {ckpt.metadata.get('kind')!r}")
    cfg = M.ModelConfig.from_dict(ckpt.metadata["model"])
    clf = M.ClassifierModel(cfg, int(ckpt.metadata["n_classes"]), Rng(0), pooling=ckpt.metadata["pooling"])
    for name, p in clf.params.items():
        if name not in ckpt.tensors:
            raise CheckpointIncompatible(f"checkpoint missing tensor {name}")
        if ckpt.tensors[name].shape != p.data.shape:
            raise CheckpointIncompatible(f"tensor {name} shape {ckpt.tensors[name].shape} vs {p.data.shape}")
        p.data = ckpt.tensors[name].astype(np.float32).copy()
    return clf


def pretrain_model_from_checkpoint(ckpt: Checkpoint) -> M.MaePretrainModel:
    if ckpt.metadata.get("kind") != "pretrain":
        raise CheckpointIncompatible(f"expected a pretrain checkpoint, got {ckpt.metadata.get('kind')!r}")
    cfg = M.ModelConfig.from_dict(ckpt.metadata["model"])
    net = M.MaePretrainModel(cfg, Rng(0))
    for name, p in net.params.items():
        if name not in ckpt.tensors:
            raise CheckpointIncompatible(f"checkpoint missing tensor {name}")
        p.data = ckpt.tensors[name].astype(np.float32).copy()
    return net


# ---------------------------------------------------------------------------
# pretraining hyperparameter grid search over manifest folds


def classifier_predict(clf: M.ClassifierModel, images, norm: NormalizationSpec = NormalizationSpec(),
                       batch_size: int = 32) -> np.ndarray:
    """Class probabilities for raw [0, 1] images (grayscale or RGB)."""
    x = np.stack([imgproc.normalize(promote_rgb(np.clip(im, 0.0, 1.0)), norm) for im in images])
    return M.predict_proba(clf, x, batch_size=batch_size)


def validation_cross_entropy(clf: M.ClassifierModel, images, labels,
                             norm: NormalizationSpec = NormalizationSpec(),
                             batch_size: int = 32) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    images = list(images)
    total = 0.0
    for i in range(0, len(images), batch_size):
        x = np.stack([imgproc.normalize(promote_rgb(np.clip(im, 0.0, 1.0)), norm) for im in images[i : i + batch_size]])
        logits = M.classify_forward(clf, x, train=False)
        total += float(M.cross_entropy(logits, labels[i : i + batch_size]).data) * len(x)
    return total / len(images)


def grid_search_finetune(
    checkpoint: Checkpoint,
    images,
    labels,
    folds,
    n_classes: int,
    epochs: int,
    seed: int,
    learning_rates: tuple[float, ...] = (0.0003, 0.001),
    weight_decays: tuple[float, ...] = (0.01, 0.05),
    batch_size: int = 16,
    max_steps: int | None = None,
) -> dict:
    """Cross-validated (lr, weight decay) selection for fine-tuning: each
    combination is scored by mean held-out cross-entropy over the folds."""
    images = list(images)
    labels = np.asarray(labels, dtype=np.int64)
    folds = np.asarray(folds)
    if not (len(folds) == len(images) == len(labels)):
        raise ValueError("images, labels and folds must align")
    fold_ids = sorted(set(int(f) for f in folds))
    if len(fold_ids) < 2:
        raise ValueError("grid search needs at least 2 folds")
    results = []
    for lr in learning_rates:
        for wd in weight_decays:
            val_losses = []
            for f in fold_ids:
                tr = folds != f
                clf, _, _ = finetune(
                    checkpoint,
                    [im for im, keep in zip(images, tr) if keep],
                    labels[tr],
                    n_classes=n_classes,
                    epochs=epochs,
                    seed=seed,
                    batch_size=batch_size,
                    base_lr=lr,
                    optimizer=OptimizerConfig(weight_decay=wd),
                    max_steps=max_steps,
                )
                val_losses.append(
                    validation_cross_entropy(clf, [im for im, keep in zip(images, tr) if not keep], labels[~tr])
                )
            results.append({
                "lr": lr,
                "weight_decay": wd,
                "val_losses": val_losses,
                "mean_val_loss": float(np.mean(val_losses)),
            })
    best = min(results, key=lambda r: r["mean_val_loss"])
    return {"results": results, "best": best}


def validation_masked_mse(model: M.MaePretrainModel, images, seed: int,
                          norm: NormalizationSpec = NormalizationSpec(),
                          batch_size: int = 16) -> float:
    """Masked-reconstruction loss on held-out images with a fixed mask seed."""
    rng = Rng(seed)
    losses = []
    images = list(images)
    for i in range(0, len(images), batch_size):
        x = np.stack([imgproc.normalize(promote_rgb(np.clip(im, 0, 1)), norm) for im in images[i : i + batch_size]])
        loss, _, _ = M.pretrain_forward(model, x, rng, train=False)
        losses.append(float(loss.data) * len(x))
    return sum(losses) / len(images)


def grid_search_pretrain(
    cfg: M.ModelConfig,
    images,
    folds: np.ndarray,
    epochs: int,
    seed: int,
    learning_rates: tuple[float, ...] = (0.0003, 0.001),
    weight_decays: tuple[float, ...] = (0.01, 0.05),
    batch_size: int = 16,
) -> dict:
    """Cross-validated optimizer selection: for every (lr, wd) combination,
    pretrain on all folds but one and score masked MSE on the held-out
    fold; the combination with the lowest mean validation loss wins."""
    images = list(images)
    folds = np.asarray(folds)
    if len(folds) != len(images):
        raise ValueError("folds and images length mismatch")
    fold_ids = sorted(set(int(f) for f in folds))
    if len(fold_ids) < 2:
        raise ValueError("grid search needs at least 2 folds")
    results = []
    for lr in learning_rates:
        for wd in weight_decays:
            val_losses = []
            for f in fold_ids:
                train_imgs = [im for im, ff in zip(images, folds) if ff != f]
                val_imgs = [im for im, ff in zip(images, folds) if ff == f]
                net = M.MaePretrainModel(cfg, Rng(seed))
                pretrain(
                    net, train_imgs, epochs=epochs, seed=seed, batch_size=batch_size,
                    base_lr=lr, optimizer=OptimizerConfig(weight_decay=wd), augment_cfg=None,
                )
                val_losses.append(validation_masked_mse(net, val_imgs, seed=seed))
            results.append({
                "lr": lr,
                "weight_decay": wd,
                "val_losses": val_losses,
                "mean_val_loss": float(np.mean(val_losses)),
            })
    best = min(results, key=lambda r: r["mean_val_loss"])
    return {"results": results, "best": best}
