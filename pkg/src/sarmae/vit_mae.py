"""ViT masked autoencoder for 12-channel SAR composites."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .nn import Block, LayerNorm, Linear, Module, Parameter, block_params, linear_params
from .tensor_core import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    gather_tokens,
    make_rng,
    mse,
    no_grad,
    trunc_normal,
)


@dataclass(frozen=True)
class MaeConfig:
    image_size: int = 448
    patch_size: int = 16
    in_channels: int = 12
    enc_dim: int = 768
    enc_depth: int = 12
    enc_heads: int = 12
    dec_dim: int = 512
    dec_depth: int = 1
    dec_heads: int = 16
    mask_ratio: float = 0.75
    use_cls_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        for dim, heads, label in ((self.enc_dim, self.enc_heads, "enc"), (self.dec_dim, self.dec_heads, "dec")):
            if dim % heads:
                raise ValueError(f"{label}_dim {dim} not divisible by {label}_heads {heads}")
            if dim % 4:
                raise ValueError(f"{label}_dim {dim} must be a multiple of 4 for 2-D sin-cos embeddings")

    @classmethod
    def paper(cls) -> "MaeConfig":
        return cls()

    @classmethod
    def desk(cls) -> "MaeConfig":
        return cls(image_size=64, patch_size=8, enc_dim=192, enc_depth=4, enc_heads=3, dec_dim=96, dec_depth=2, dec_heads=3)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "MaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown MaeConfig keys: {sorted(unknown)}")
        return cls(**values)


# -- patches -----------------------------------------------------------------------

def patchify(img, cfg: MaeConfig) -> Tensor:
    """(n, C, H, W) -> (n, L, C*p*p); each token is flattened channel-major (c, row, col)."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    n, c, h, w = x.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.in_channels:
        raise ShapeError(f"patchify expects (n, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
    p, g = cfg.patch_size, cfg.grid_size
    x = x.reshape(n, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, g * g, c * p * p)


def unpatchify(tokens, cfg: MaeConfig) -> Tensor:
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    n, length, d = x.shape
    p, g, c = cfg.patch_size, cfg.grid_size, cfg.in_channels
    if length != g * g or d != c * p * p:
        raise ShapeError(f"unpatchify expects (n, {g * g}, {c * p * p}), got {x.shape}")
    x = x.reshape(n, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(n, c, g * p, g * p)


# -- masking -------------------------------------------------------------------------

def masked_count(length: int, ratio: float) -> int:
    """round-half-up(ratio * length), clamped so >= 1 token is masked and >= 1 stays visible."""
    if length < 2:
        raise ValueError("masking needs at least two tokens")
    count = math.floor(ratio * length + 0.5)
    return min(max(count, 1), length - 1)


@dataclass
class MaskPlan:
    """Batched masking plan; row ``b`` belongs to sample ``b``.

    ``shuffle[b]`` lists patch ids in shuffled order: the first ``n_keep`` are
    visible (``kept``), the rest masked. ``restore`` is the inverse permutation.
    """

    shuffle: np.ndarray
    restore: np.ndarray
    n_keep: int

    @property
    def kept(self) -> np.ndarray:
        return self.shuffle[:, : self.n_keep]

    @property
    def masked(self) -> np.ndarray:
        return self.shuffle[:, self.n_keep :]

    @property
    def num_patches(self) -> int:
        return self.shuffle.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """(n, L) array, 1 where the patch is masked, in original patch order."""
        m = np.ones(self.shuffle.shape, dtype=np.float32)
        m[:, : self.n_keep] = 0
        return np.take_along_axis(m, self.restore, axis=1)

    def sample(self, b: int) -> dict:
        return {
            "batch_index": b,
            "kept_indices": self.kept[b].tolist(),
            "masked_indices": self.masked[b].tolist(),
            "restore_permutation": self.restore[b].tolist(),
        }

    @classmethod
    def full(cls, n: int, length: int) -> "MaskPlan":
        ids = np.tile(np.arange(length), (n, 1))
        return cls(shuffle=ids, restore=ids.copy(), n_keep=length)


def make_mask_plan(n: int, length: int, ratio: float, rng) -> MaskPlan:
    """Uniform per-sample shuffles.

    ``rng`` is either one Generator (rows drawn in order) or a sequence of
    Generators, one stream per sample, which makes a plan independent of how
    samples are grouped into batches.
    """
    n_keep = length - masked_count(length, ratio)
    if isinstance(rng, np.random.Generator):
        noise = rng.random((n, length))
    else:
        if len(rng) != n:
            raise ValueError(f"need one rng per sample, got {len(rng)} for {n}")
        noise = np.stack([r.random(length) for r in rng])
    shuffle = np.argsort(noise, axis=1, kind="stable")
    restore = np.argsort(shuffle, axis=1, kind="stable")
    return MaskPlan(shuffle=shuffle, restore=restore, n_keep=n_keep)


def random_mask(tokens, ratio: float, rng) -> tuple[Tensor, MaskPlan]:
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    n, length, _ = x.shape
    plan = make_mask_plan(n, length, ratio, rng)
    return gather_tokens(x, plan.kept), plan


# -- positional embeddings ---------------------------------------------------------

def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = positions.reshape(-1)[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(dim: int, grid: int, cls_token: bool) -> np.ndarray:
    """Fixed (L [+1], dim) table: first half encodes the row, second half the column."""
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    table = np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)
    if cls_token:
        table = np.concatenate([np.zeros((1, dim)), table], axis=0)
    return table.astype(np.float32)


# -- model ---------------------------------------------------------------------------

class ViTEncoder(Module):
    def __init__(self, cfg: MaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.enc_dim, rng)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, cfg.enc_dim))) if cfg.use_cls_token else None
        table = sincos_2d(cfg.enc_dim, cfg.grid_size, cfg.use_cls_token)
        self.pos_embed = Parameter(table[None], trainable=False)
        self.blocks = [Block(cfg.enc_dim, cfg.enc_heads, rng) for _ in range(cfg.enc_depth)]
        self.norm = LayerNorm(cfg.enc_dim)

    def forward(self, tokens: Tensor, positions: np.ndarray | None = None) -> Tensor:
        """Embed patch tokens found at ``positions`` (original patch ids) and encode them."""
        n, length, _ = tokens.shape
        if positions is None:
            positions = np.tile(np.arange(length), (n, 1))
        offset = 1 if self.cfg.use_cls_token else 0
        pos = Tensor(self.pos_embed.data[0][positions + offset])
        x = self.patch_embed(tokens) + pos
        if self.cls_token is not None:
            cls = self.cls_token + Tensor(self.pos_embed.data[:, :1])
            x = concat([broadcast_to(cls, (n, 1, self.cfg.enc_dim)), x], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def patch_tokens(self, latent: Tensor) -> Tensor:
        """Drop the cls token, if any."""
        return latent[:, 1:] if self.cfg.use_cls_token else latent


class MaeDecoder(Module):
    def __init__(self, cfg: MaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.decoder_embed = Linear(cfg.enc_dim, cfg.dec_dim, rng)
        self.mask_token = Parameter(trunc_normal(rng, (1, 1, cfg.dec_dim)))
        table = sincos_2d(cfg.dec_dim, cfg.grid_size, cfg.use_cls_token)
        self.decoder_pos_embed = Parameter(table[None], trainable=False)
        self.decoder_blocks = [Block(cfg.dec_dim, cfg.dec_heads, rng) for _ in range(cfg.dec_depth)]
        self.decoder_norm = LayerNorm(cfg.dec_dim)
        self.decoder_pred = Linear(cfg.dec_dim, cfg.patch_dim, rng)

    def forward(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        cfg = self.cfg
        x = self.decoder_embed(latent)
        n = x.shape[0]
        if cfg.use_cls_token:
            cls, vis = x[:, :1], x[:, 1:]
        else:
            cls, vis = None, x
        n_mask = plan.num_patches - vis.shape[1]
        parts = [vis]
        if n_mask:
            parts.append(broadcast_to(self.mask_token, (n, n_mask, cfg.dec_dim)))
        full = gather_tokens(concat(parts, axis=1), plan.restore)
        if cls is not None:
            full = concat([cls, full], axis=1)
        x = full + Tensor(self.decoder_pos_embed.data)
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_pred(self.decoder_norm(x))
        return x[:, 1:] if cls is not None else x


class MaskedAutoencoder(Module):
    def __init__(self, cfg: MaeConfig, seed: int = 0):
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg, make_rng(seed, "encoder"))
        self.decoder = MaeDecoder(cfg, make_rng(seed, "decoder"))

    def forward(self, images, rng) -> tuple[Tensor, Tensor, MaskPlan]:
        """Returns ``(loss, pred, plan)``; ``pred`` is (n, L, patch_dim) in patch order."""
        target = patchify(images, self.cfg)
        visible, plan = random_mask(target.detach(), self.cfg.mask_ratio, rng)
        latent = encode(self.encoder, visible, plan)
        pred = decode_reconstruct(self.decoder, latent, plan)
        return mae_loss(pred, target.detach(), plan), pred, plan


def encode(encoder: ViTEncoder, visible_tokens: Tensor, plan: MaskPlan) -> Tensor:
    return encoder(visible_tokens, plan.kept)


def decode_reconstruct(decoder: MaeDecoder, latent: Tensor, plan: MaskPlan) -> Tensor:
    return decoder(latent, plan)


def mae_loss(pred: Tensor, target, plan: MaskPlan) -> Tensor:
    """MSE over the masked tokens only; visible-token predictions are never read."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: pred {pred.shape} vs target {target.shape}")
    masked = plan.masked
    if masked.size == 0:
        raise ValueError("mae_loss: masked set is empty")
    return mse(gather_tokens(pred, masked), gather_tokens(target, masked))


# -- parameter counts ------------------------------------------------------------

def encoder_param_count(cfg: MaeConfig, include_fixed: bool = True) -> int:
    """Closed-form count. ``include_fixed`` adds the frozen positional table."""
    cls = 1 if cfg.use_cls_token else 0
    count = linear_params(cfg.patch_dim, cfg.enc_dim) + cls * cfg.enc_dim
    count += cfg.enc_depth * block_params(cfg.enc_dim) + 2 * cfg.enc_dim
    if include_fixed:
        count += (cfg.num_patches + cls) * cfg.enc_dim
    return count


def decoder_param_count(cfg: MaeConfig, include_fixed: bool = True) -> int:
    cls = 1 if cfg.use_cls_token else 0
    count = linear_params(cfg.enc_dim, cfg.dec_dim) + cfg.dec_dim
    count += cfg.dec_depth * block_params(cfg.dec_dim) + 2 * cfg.dec_dim
    count += linear_params(cfg.dec_dim, cfg.patch_dim)
    if include_fixed:
        count += (cfg.num_patches + cls) * cfg.dec_dim
    return count


# -- reconstruction panels -----------------------------------------------------------

def reconstruct_image(pred, original, plan: MaskPlan, cfg: MaeConfig, fill_value: float = 0.0):
    """Build (masked, reconstruction, original) image stacks, each (n, C, H, W).

    The reconstruction shows predicted pixels on masked patches and the input
    on visible ones; the masked panel replaces masked patches by ``fill_value``.
    """
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    original = original.data if isinstance(original, Tensor) else np.asarray(original)
    with no_grad():
        target = patchify(Tensor(original), cfg).data
    mask = plan.mask[:, :, None].astype(bool)
    masked_tokens = np.where(mask, np.asarray(fill_value, dtype=target.dtype), target)
    recon_tokens = np.where(mask, pred.astype(target.dtype), target)
    with no_grad():
        masked_img = unpatchify(Tensor(masked_tokens), cfg).data
        recon_img = unpatchify(Tensor(recon_tokens), cfg).data
    return masked_img, recon_img, original.copy()


def _to_rgb(img: np.ndarray, mask_img: np.ndarray | None, channels, lo, hi) -> np.ndarray:
    rgb = np.stack([img[c] for c in channels], axis=-1)
    rgb = np.clip((rgb - lo) / (hi - lo + 1e-12), 0.0, 1.0)
    if mask_img is not None:
        rgb[mask_img] = 0.5
    return (rgb * 255).astype(np.uint8)


def write_reconstruction_grid(panels, path, plan: MaskPlan, cfg: MaeConfig, channels=(4, 5, 6), gap: int = 2) -> Path:
    """Write a PNG with one row per sample and columns masked | reconstruction | original.

    Colour comes from three channels (default: summer VV / VH / VV-VH);
    masked patches in the left panel are drawn grey.
    """
    from PIL import Image

    masked_img, recon_img, original = panels
    n, _, h, w = original.shape
    pix_mask = np.repeat(np.repeat(plan.mask.reshape(n, cfg.grid_size, cfg.grid_size), cfg.patch_size, 1), cfg.patch_size, 2).astype(bool)
    sel = original[:, list(channels)]
    lo = np.percentile(sel, 2, axis=(0, 2, 3))
    hi = np.percentile(sel, 98, axis=(0, 2, 3))
    canvas = np.full((n * (h + gap) - gap, 3 * (w + gap) - gap, 3), 255, dtype=np.uint8)
    for i in range(n):
        row = i * (h + gap)
        for j, (img, m) in enumerate(((masked_img[i], pix_mask[i]), (recon_img[i], None), (original[i], None))):
            col = j * (w + gap)
            canvas[row : row + h, col : col + w] = _to_rgb(img, m, channels, lo, hi)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
    np.savez(path.with_suffix(".npz"), masked=masked_img, reconstruction=recon_img, original=original, mask=plan.mask)
    return path
