"""Downstream decoders: tile-level vegetation regression and 11-class segmentation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .nn import Linear, Module, Parameter, linear_params
from .tensor_core import (
    CheckpointError,
    Tensor,
    conv2d,
    elu,
    load_checkpoint,
    make_rng,
    relu,
    swapaxes,
    trunc_normal,
    upsample2x,
)
from .vit_mae import MaeConfig, ViTEncoder

NUM_CLASSES = 11


def _from_dict(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**values)


@dataclass(frozen=True)
class RegressionHeadConfig:
    seq_proj: int = 196
    hid_proj: int = 196
    fc_sizes: tuple[int, ...] = (512, 256, 128)

    def __post_init__(self):
        if self.seq_proj < 1 or self.hid_proj < 1:
            raise ValueError("projection sizes must be positive")
        if any(b >= a for a, b in zip(self.fc_sizes, self.fc_sizes[1:])):
            raise ValueError(f"fc_sizes must be strictly decreasing, got {self.fc_sizes}")

    @classmethod
    def desk(cls) -> "RegressionHeadConfig":
        return cls(seq_proj=16, hid_proj=16, fc_sizes=(128, 64, 32))

    to_dict = asdict
    from_dict = classmethod(_from_dict)


@dataclass(frozen=True)
class SegHeadConfig:
    num_classes: int = NUM_CLASSES
    stage_channels: int = 256

    @classmethod
    def desk(cls) -> "SegHeadConfig":
        return cls(stage_channels=64)

    to_dict = asdict
    from_dict = classmethod(_from_dict)


def num_upsample_stages(mae: MaeConfig) -> int:
    """Number of 2x stages from the token grid to full resolution."""
    stages = int(round(math.log2(mae.image_size / mae.grid_size)))
    if mae.grid_size * 2**stages != mae.image_size:
        raise ValueError(f"token grid {mae.grid_size} cannot reach {mae.image_size} by 2x doublings")
    return stages


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out))
        self.padding = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


def conv_params(c_in: int, c_out: int, kernel: int) -> int:
    return c_in * c_out * kernel * kernel + c_out


class RegressionHead(Module):
    """Hidden projection, then sequence projection, flatten, FC stack, scalar.

    ReLU follows every FC layer except the last of ``fc_sizes``, which gets ELU;
    the final map to the scalar is affine. ``target_mean``/``target_scale``
    are fixed buffers mapping the raw output to label units (identity by default).
    """

    def __init__(self, cfg: RegressionHeadConfig, enc_dim: int, num_tokens: int, rng: np.random.Generator):
        self.cfg = cfg
        self.hid_proj = Linear(enc_dim, cfg.hid_proj, rng)
        self.seq_proj = Linear(num_tokens, cfg.seq_proj, rng)
        sizes = (cfg.seq_proj * cfg.hid_proj,) + tuple(cfg.fc_sizes)
        self.fc = [Linear(a, b, rng) for a, b in zip(sizes, sizes[1:])]
        self.out = Linear(sizes[-1], 1, rng)
        self.target_mean = 0.0
        self.target_scale = 1.0

    def features(self, tokens: Tensor) -> Tensor:
        """Activations feeding the final affine map (post-ELU)."""
        x = self.hid_proj(tokens)  # (n, L, hid)
        x = self.seq_proj(swapaxes(x, 1, 2))  # (n, hid, seq)
        x = x.reshape(x.shape[0], -1)
        for i, layer in enumerate(self.fc):
            x = layer(x)
            x = elu(x) if i == len(self.fc) - 1 else relu(x)
        return x

    def forward(self, tokens: Tensor) -> Tensor:
        raw = self.out(self.features(tokens)).reshape(tokens.shape[0])
        if self.target_scale == 1.0 and self.target_mean == 0.0:
            return raw
        return raw * self.target_scale + self.target_mean


def regression_head_param_count(cfg: RegressionHeadConfig, enc_dim: int, num_tokens: int) -> int:
    sizes = (cfg.seq_proj * cfg.hid_proj,) + tuple(cfg.fc_sizes)
    count = linear_params(enc_dim, cfg.hid_proj) + linear_params(num_tokens, cfg.seq_proj)
    count += sum(linear_params(a, b) for a, b in zip(sizes, sizes[1:]))
    return count + linear_params(sizes[-1], 1)


class SegmentationHead(Module):
    """Progressive-upsampling decoder: 1x1 conv, then per stage 3x3 conv + ReLU + bilinear 2x, then 1x1 to logits."""

    def __init__(self, cfg: SegHeadConfig, mae: MaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.grid = mae.grid_size
        self.stages = num_upsample_stages(mae)
        c = cfg.stage_channels
        self.input_proj = Conv2d(mae.enc_dim, c, 1, rng)
        self.stage_convs = [Conv2d(c, c, 3, rng) for _ in range(self.stages)]
        self.classifier = Conv2d(c, cfg.num_classes, 1, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        n, length, d = tokens.shape
        if length != self.grid * self.grid:
            raise ValueError(f"segmentation head expects {self.grid ** 2} tokens, got {length}")
        x = tokens.reshape(n, self.grid, self.grid, d).transpose(0, 3, 1, 2)
        x = self.input_proj(x)
        for conv in self.stage_convs:
            x = upsample2x(relu(conv(x)))
        return self.classifier(x)


def seg_head_param_count(cfg: SegHeadConfig, mae: MaeConfig) -> int:
    c = cfg.stage_channels
    return conv_params(mae.enc_dim, c, 1) + num_upsample_stages(mae) * conv_params(c, c, 3) + conv_params(c, cfg.num_classes, 1)


def build_head(task: str, mae: MaeConfig, head_cfg, seed: int) -> Module:
    rng = make_rng(seed, "head", task)
    if task == "modisveg":
        return RegressionHead(head_cfg, mae.enc_dim, mae.num_patches, rng)
    if task == "esawc":
        return SegmentationHead(head_cfg, mae, rng)
    raise ValueError(f"unknown downstream task {task!r}")


class FineTuneModel(Module):
    """Encoder (all tokens visible, cls stripped) followed by a task head."""

    def __init__(self, encoder: ViTEncoder, head: Module):
        self.encoder = encoder
        self.head = head

    def forward(self, patch_tokens: Tensor) -> Tensor:
        latent = self.encoder(patch_tokens)
        return self.head(self.encoder.patch_tokens(latent))


ENCODER_PREFIX = "encoder."


def encoder_state_from_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = load_checkpoint(path)
    state = {k[len(ENCODER_PREFIX) :]: v for k, v in tensors.items() if k.startswith(ENCODER_PREFIX)}
    if not state:
        raise CheckpointError(f"{path}: no '{ENCODER_PREFIX}*' tensors found")
    return state, meta


def attach(mae: MaeConfig, head: Module, init_mode: str, seed: int = 0, checkpoint=None) -> FineTuneModel:
    """Pair a head with an encoder.

    ``scratch`` builds a freshly initialised encoder from ``seed``;
    ``pretrained`` loads the encoder tensors of an MAE checkpoint and drops
    the reconstruction decoder. Either way the whole model is trainable.
    """
    encoder = ViTEncoder(mae, make_rng(seed, "encoder"))
    if init_mode == "pretrained":
        if checkpoint is None:
            raise ValueError("pretrained init needs a checkpoint")
        state, _ = encoder_state_from_checkpoint(checkpoint)
        encoder.load_state_dict(state)
    elif init_mode != "scratch":
        raise ValueError(f"init_mode must be 'scratch' or 'pretrained', got {init_mode!r}")
    return FineTuneModel(encoder, head)
