"""Masked-autoencoder vision transformer.

Images are cut into non-overlapping P x P patches; a uniformly sampled
subset is hidden and only the visible patches are encoded. A lightweight
decoder sees the encoded visible tokens plus a learnable mask token at
every hidden position and predicts raw pixels; the loss is the MSE over
hidden patches only. For fine-tuning the encoder runs on all patches and
feeds a linear classification head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class IndivisibleDims(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    encoder_layers: int = 12
    encoder_dim: int = 768
    encoder_heads: int = 12
    decoder_layers: int = 8
    decoder_dim: int = 512
    decoder_heads: int = 8
    mask_ratio: float = 0.25
    mlp_ratio: int = 4
    use_class_token: bool = True
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise IndivisibleDims(f"image {self.image_size} not divisible by patch {self.patch_size}")
        if self.encoder_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("dims must divide head counts")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset used by the test suite."""
        base = dict(
            image_size=64,
            patch_size=8,
            encoder_layers=4,
            encoder_dim=128,
            encoder_heads=4,
            decoder_layers=2,
            decoder_dim=64,
            decoder_heads=4,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# patches and masking


@dataclass
class PatchGrid:
    patches: np.ndarray  # (N, P*P*C), row i is the row-major (P, P, C) tile
    image_h: int
    image_w: int
    patch_size: int
    channels: int


def patchify(img: np.ndarray, patch_size: int) -> PatchGrid:
    """(C, H, W) -> (N, P*P*C); raises IndivisibleDims unless P | H, W."""
    img = np.asarray(img)
    c, h, w = img.shape
    p = patch_size
    if h % p or w % p:
        raise IndivisibleDims(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    tiles = img.reshape(c, gh, p, gw, p).transpose(1, 3, 2, 4, 0)  # (gh, gw, p, p, c)
    return PatchGrid(
        patches=tiles.reshape(gh * gw, p * p * c),
        image_h=h,
        image_w=w,
        patch_size=p,
        channels=c,
    )


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p, c = grid.patch_size, grid.channels
    gh, gw = grid.image_h // p, grid.image_w // p
    tiles = grid.patches.reshape(gh, gw, p, p, c).transpose(4, 0, 2, 1, 3)
    return tiles.reshape(c, grid.image_h, grid.image_w)


@dataclass(frozen=True)
class MaskPlan:
    masked: np.ndarray  # sorted unique patch ids
    visible: np.ndarray  # sorted complement (original patch order)
    n_patches: int

    @property
    def m(self) -> int:
        return len(self.masked)


def sample_mask(n_patches: int, mask_ratio: float, rng: Rng) -> MaskPlan:
    """floor(ratio * N) indices drawn uniformly without replacement."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must be in [0, 1)")
    m = int(np.floor(mask_ratio * n_patches))
    perm = rng.permutation(n_patches)
    masked = np.sort(perm[:m])
    visible = np.sort(perm[m:])
    return MaskPlan(masked=masked, visible=visible, n_patches=n_patches)


# ---------------------------------------------------------------------------
# parameters


def _init_linear(params, prefix, d_in, d_out, rng):
    params[f"{prefix}.w"] = Tensor(rng.truncated_normal((d_in, d_out)).astype(np.float32), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)


def _init_norm(params, prefix, dim):
    params[f"{prefix}.g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)


def _init_block(params, prefix, dim, mlp_ratio, rng):
    _init_norm(params, f"{prefix}.ln1", dim)
    _init_linear(params, f"{prefix}.attn.qkv", dim, 3 * dim, rng)
    _init_linear(params, f"{prefix}.attn.out", dim, dim, rng)
    _init_norm(params, f"{prefix}.ln2", dim)
    _init_linear(params, f"{prefix}.mlp.fc1", dim, mlp_ratio * dim, rng)
    _init_linear(params, f"{prefix}.mlp.fc2", mlp_ratio * dim, dim, rng)


def _encoder_param_names(cfg: ModelConfig) -> list[str]:
    names = ["patch_embed.w", "patch_embed.b", "pos_enc"]
    for i in range(cfg.encoder_layers):
        for suffix in (
            "ln1.g", "ln1.b", "attn.qkv.w", "attn.qkv.b", "attn.out.w", "attn.out.b",
            "ln2.g", "ln2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b",
        ):
            names.append(f"enc.{i}.{suffix}")
    names += ["enc_norm.g", "enc_norm.b"]
    return names


class MaePretrainModel:
    """Encoder + decoder + reconstruction head for masked pretraining."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        p: dict[str, Tensor] = {}
        _init_linear(p, "patch_embed", cfg.patch_dim, cfg.encoder_dim, rng)
        p["pos_enc"] = Tensor(
            rng.truncated_normal((cfg.n_patches, cfg.encoder_dim)).astype(np.float32), requires_grad=True
        )
        for i in range(cfg.encoder_layers):
            _init_block(p, f"enc.{i}", cfg.encoder_dim, cfg.mlp_ratio, rng)
        _init_norm(p, "enc_norm", cfg.encoder_dim)
        _init_linear(p, "enc_to_dec", cfg.encoder_dim, cfg.decoder_dim, rng)
        p["mask_token"] = Tensor(rng.truncated_normal((cfg.decoder_dim,)).astype(np.float32), requires_grad=True)
        p["pos_dec"] = Tensor(
            rng.truncated_normal((cfg.n_patches, cfg.decoder_dim)).astype(np.float32), requires_grad=True
        )
        for i in range(cfg.decoder_layers):
            _init_block(p, f"dec.{i}", cfg.decoder_dim, cfg.mlp_ratio, rng)
        _init_norm(p, "dec_norm", cfg.decoder_dim)
        _init_linear(p, "head", cfg.decoder_dim, cfg.patch_dim, rng)
        self.params = p

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())


class ClassifierModel:
    """Pretrained encoder + pooling + linear head for fine-tuning."""

    def __init__(self, cfg: ModelConfig, n_classes: int, rng: Rng, pooling: str | None = None):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        if pooling is None:
            pooling = "class_token" if cfg.use_class_token else "mean_pool"
        if pooling not in ("class_token", "mean_pool"):
            raise ValueError(f"unknown pooling {pooling!r}")
        if pooling == "class_token" and not cfg.use_class_token:
            raise ValueError("class_token pooling requires use_class_token")
        self.cfg = cfg
        self.n_classes = n_classes
        self.pooling = pooling
        p: dict[str, Tensor] = {}
        _init_linear(p, "patch_embed", cfg.patch_dim, cfg.encoder_dim, rng)
        p["pos_enc"] = Tensor(
            rng.truncated_normal((cfg.n_patches, cfg.encoder_dim)).astype(np.float32), requires_grad=True
        )
        for i in range(cfg.encoder_layers):
            _init_block(p, f"enc.{i}", cfg.encoder_dim, cfg.mlp_ratio, rng)
        _init_norm(p, "enc_norm", cfg.encoder_dim)
        if pooling == "class_token":
            p["cls_token"] = Tensor(rng.truncated_normal((cfg.encoder_dim,)).astype(np.float32), requires_grad=True)
            p["cls_pos"] = Tensor(rng.truncated_normal((cfg.encoder_dim,)).astype(np.float32), requires_grad=True)
        _init_linear(p, "head", cfg.encoder_dim, n_classes, rng)
        self.params = p

    def load_encoder(self, tensors: dict[str, np.ndarray]) -> list[str]:
        """Copy matching encoder weights from a pretraining checkpoint;
        returns the names actually loaded."""
        loaded = []
        for name in _encoder_param_names(self.cfg):
            if name in tensors:
                src = tensors[name]
                if src.shape != self.params[name].data.shape:
                    raise ValueError(f"shape mismatch for {name}: {src.shape} vs {self.params[name].data.shape}")
                self.params[name].data = src.astype(np.float32).copy()
                loaded.append(name)
        return loaded

    def encoder_param_names(self) -> list[str]:
        return _encoder_param_names(self.cfg)


# ---------------------------------------------------------------------------
# forward passes


def _affine_norm(params, prefix, x: Tensor) -> Tensor:
    return T.layer_norm(x, axis=-1, eps=1e-6) * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def _attention(params, prefix, x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])  # (B, T, 3D)
    qkv = T.reshape(qkv, (b, t, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, heads, T, dh)

    def component(i):
        return T.reshape(T.gather(qkv, [i], axis=0), (b, heads, t, dh))

    q, k, v = component(0), component(1), component(2)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, heads, T, dh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return T.linear(ctx, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def _block(params, prefix, x: Tensor, heads: int, train: bool, drop_p: float, rng: Rng | None) -> Tensor:
    attn_out = _attention(params, f"{prefix}.attn", _affine_norm(params, f"{prefix}.ln1", x), heads)
    x = T.add(x, T.dropout(attn_out, drop_p, rng, train))
    h = _affine_norm(params, f"{prefix}.ln2", x)
    h = T.linear(h, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"])
    h = T.gelu(h)
    h = T.linear(h, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])
    return T.add(x, T.dropout(h, drop_p, rng, train))


def _run_blocks(params, stack: str, n_layers: int, x: Tensor, heads: int, train: bool, drop_p: float, rng) -> Tensor:
    for i in range(n_layers):
        x = _block(params, f"{stack}.{i}", x, heads, train, drop_p, rng)
    return x


def _encode_visible(model: MaePretrainModel, patch_stack: np.ndarray, vis_idx: np.ndarray,
                    train: bool = False, rng: Rng | None = None) -> Tensor:
    """patch_stack (B, N, d), vis_idx (B, V) -> encoded visible tokens (B, V, D)."""
    p, cfg = model.params, model.cfg
    batch = np.arange(patch_stack.shape[0])[:, None]
    x_vis = Tensor(patch_stack[batch, vis_idx])  # pixels are constants
    tokens = T.linear(x_vis, p["patch_embed.w"], p["patch_embed.b"])
    tokens = T.add(tokens, T.gather(p["pos_enc"], vis_idx, axis=0))  # (B, V, D) positional rows
    tokens = _run_blocks(p, "enc", cfg.encoder_layers, tokens, cfg.encoder_heads, train, cfg.dropout_p, rng)
    return _affine_norm(p, "enc_norm", tokens)


def encode(model: MaePretrainModel, patches: PatchGrid, plan: MaskPlan,
           train: bool = False, rng: Rng | None = None) -> Tensor:
    """Encode the visible patches of one image -> (V, encoder_dim)."""
    out = _encode_visible(model, patches.patches[None], plan.visible[None], train, rng)
    return T.reshape(out, out.shape[1:])


def _decode_full(model: MaePretrainModel, encoded: Tensor, vis_idx: np.ndarray,
                 train: bool = False, rng: Rng | None = None) -> Tensor:
    """encoded (B, V, D) -> reconstructed pixels for all patches (B, N, d)."""
    p, cfg = model.params, model.cfg
    b = encoded.shape[0]
    proj = T.linear(encoded, p["enc_to_dec.w"], p["enc_to_dec.b"])  # (B, V, Dd)
    ones = Tensor(np.ones((b, cfg.n_patches, 1), dtype=np.float32))
    base = T.mul(ones, T.reshape(p["mask_token"], (1, 1, cfg.decoder_dim)))
    tokens = T.scatter_batched(base, vis_idx, proj)
    tokens = T.add(tokens, p["pos_dec"])
    tokens = _run_blocks(p, "dec", cfg.decoder_layers, tokens, cfg.decoder_heads, train, cfg.dropout_p, rng)
    tokens = _affine_norm(p, "dec_norm", tokens)
    return T.linear(tokens, p["head.w"], p["head.b"])


def decode(model: MaePretrainModel, encoded: Tensor, plan: MaskPlan,
           train: bool = False, rng: Rng | None = None) -> Tensor:
    """Decode one image's visible tokens -> (N, patch_dim) reconstruction."""
    if encoded.data.ndim == 2:
        encoded = T.reshape(encoded, (1,) + encoded.shape)
    out = _decode_full(model, encoded, plan.visible[None], train, rng)
    return T.reshape(out, out.shape[1:])


def mae_loss(x_hat: Tensor, x: np.ndarray | Tensor, plan: MaskPlan | list[MaskPlan]):
    """Mean squared error over hidden patches only: sum over masked rows of
    ||x_hat_i - x_i||^2, divided by (M * d). Batched inputs take the mean
    of per-image losses."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x_hat.data.ndim == 2:
        plans = [plan]
        x_hat_b = T.reshape(x_hat, (1,) + x_hat.shape)
        x_arr = x_arr[None]
    else:
        plans = list(plan) if isinstance(plan, (list, tuple)) else [plan]
        x_hat_b = x_hat
    if any(p.m == 0 for p in plans):
        raise EmptyMask("mask plan has no masked patches")
    masked_idx = np.stack([p.masked for p in plans])  # (B, M)
    b, m = masked_idx.shape
    d = x_hat_b.shape[-1]
    diff = T.sub(T.gather_batched(x_hat_b, masked_idx), Tensor(x_arr[np.arange(b)[:, None], masked_idx], dtype=x_hat.dtype))
    return T.tsum(T.mul(diff, diff)) * (1.0 / (b * m * d))


def mae_loss_matrix(x_hat: np.ndarray, x: np.ndarray, plan: MaskPlan) -> float:
    """Matrix form of the loss: ||(X_hat - X) o M||_F^2 / (M d) with a
    binary masking matrix. Agrees exactly with mae_loss; used as its
    cross-check."""
    mask = np.zeros_like(x)
    mask[plan.masked] = 1.0
    m = plan.m
    if m == 0:
        raise EmptyMask("mask plan has no masked patches")
    d = x.shape[1]
    return float(np.linalg.norm((x_hat - x) * mask, ord="fro") ** 2 / (m * d))


def pretrain_forward(model: MaePretrainModel, imgs: np.ndarray, rng: Rng,
                     train: bool = True):
    """imgs (B, C, H, W) -> (mean masked-MSE loss, per-image plans, x_hat).

    Each image gets an independent mask drawn from `rng`.
    """
    cfg = model.cfg
    imgs = np.asarray(imgs)
    if imgs.ndim == 3:
        imgs = imgs[None]
    grids = [patchify(im, cfg.patch_size) for im in imgs]
    patch_stack = np.stack([g.patches for g in grids])
    if patch_stack.dtype not in (np.float32, np.float64):
        patch_stack = patch_stack.astype(np.float32)
    plans = [sample_mask(cfg.n_patches, cfg.mask_ratio, rng) for _ in grids]
    vis_idx = np.stack([p.visible for p in plans])
    encoded = _encode_visible(model, patch_stack, vis_idx, train, rng)
    x_hat = _decode_full(model, encoded, vis_idx, train, rng)
    loss = mae_loss(x_hat, patch_stack, plans)
    return loss, plans, x_hat


def classify_forward(clf: ClassifierModel, imgs: np.ndarray, train: bool = False,
                     rng: Rng | None = None) -> Tensor:
    """imgs (B, C, H, W) -> logits (B, n_classes). All patches are visible;
    eval mode (train=False) is deterministic."""
    p, cfg = clf.params, clf.cfg
    imgs = np.asarray(imgs)
    if imgs.ndim == 3:
        imgs = imgs[None]
    patch_stack = np.stack([patchify(im, cfg.patch_size).patches for im in imgs])
    if patch_stack.dtype not in (np.float32, np.float64):
        patch_stack = patch_stack.astype(np.float32)
    tokens = T.linear(Tensor(patch_stack), p["patch_embed.w"], p["patch_embed.b"])
    tokens = T.add(tokens, p["pos_enc"])
    if clf.pooling == "class_token":
        b = patch_stack.shape[0]
        ones = Tensor(np.ones((b, 1, 1), dtype=np.float32))
        cls = T.mul(ones, T.reshape(T.add(p["cls_token"], p["cls_pos"]), (1, 1, cfg.encoder_dim)))
        tokens = T.concat([cls, tokens], axis=1)
    tokens = _run_blocks(p, "enc", cfg.encoder_layers, tokens, cfg.encoder_heads, train, cfg.dropout_p, rng)
    tokens = _affine_norm(p, "enc_norm", tokens)
    if clf.pooling == "class_token":
        pooled = T.reshape(T.gather(tokens, [0], axis=1), (tokens.shape[0], cfg.encoder_dim))
    else:
        pooled = T.tmean(tokens, axis=1)
    return T.linear(pooled, p["head.w"], p["head.b"])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class, stabilized with the
    log-sum-exp shift."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise T.ShapeMismatch(f"labels shape {labels.shape} vs batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(f"labels must be in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant; softmax is shift-invariant
    z = T.sub(logits, shift)
    lse = T.log(T.tsum(T.exp(z), axis=1, keepdims=True))
    logp = T.sub(z, lse)
    one_hot = np.zeros((b, c), dtype=logits.data.dtype)
    one_hot[np.arange(b), labels] = 1.0
    return T.tsum(T.mul(logp, Tensor(one_hot))) * (-1.0 / b)


def predict_proba(clf: ClassifierModel, imgs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax class probabilities, batched, eval mode."""
    imgs = np.asarray(imgs)
    if imgs.ndim == 3:
        imgs = imgs[None]
    out = []
    for i in range(0, len(imgs), batch_size):
        logits = classify_forward(clf, imgs[i : i + batch_size], train=False)
        out.append(T.softmax(logits, axis=-1).data)
    return np.concatenate(out, axis=0)
