"""Hierarchical 4-stage encoder shared across all modalities.

Each stage merges k x k patches with a strided linear embedding, then runs
channel-MLP mixer blocks (pre-norm, residual). One parameter set encodes
every modality, so the encoder is modality-blind by construction: features
differ only because inputs do.

The output pyramid has 4 levels at 1/4, 1/8, 1/16, 1/32 of the input size.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor, TensorError

STAGE_DOWNSAMPLE = (4, 2, 2, 2)
PYRAMID_LEVELS = len(STAGE_DOWNSAMPLE)
TOTAL_DOWNSAMPLE = 32


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    blocks_per_stage: int = 1

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if len(self.stage_channels) != PYRAMID_LEVELS:
            raise ValueError(f"need {PYRAMID_LEVELS} stage channel counts")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")


def init_encoder_params(cfg: EncoderConfig, rng) -> dict[str, Tensor]:
    """Fresh trainable parameters; weights uniform in +-1/sqrt(fan_in), biases zero."""
    params: dict[str, Tensor] = {}
    c_in = cfg.in_channels
    for s, (k, c_out) in enumerate(zip(STAGE_DOWNSAMPLE, cfg.stage_channels)):
        fan = c_in * k * k
        params[f"enc.s{s}.patch.w"] = T.uniform_param(rng, (fan, c_out), fan)
        params[f"enc.s{s}.patch.b"] = T.zeros_param((c_out,))
        hidden = 2 * c_out
        for b in range(cfg.blocks_per_stage):
            p = f"enc.s{s}.b{b}"
            params[f"{p}.ln.g"] = T.ones_param((c_out,))
            params[f"{p}.ln.b"] = T.zeros_param((c_out,))
            params[f"{p}.mlp.w1"] = T.uniform_param(rng, (c_out, hidden), c_out)
            params[f"{p}.mlp.b1"] = T.zeros_param((hidden,))
            params[f"{p}.mlp.w2"] = T.uniform_param(rng, (hidden, c_out), hidden)
            params[f"{p}.mlp.b2"] = T.zeros_param((c_out,))
        c_in = c_out
    return params


def _merge_patches(x: Tensor, k: int) -> Tensor:
    """C x h x w -> (h/k * w/k) x (C*k*k) token matrix, row-major patch order."""
    c, h, w = x.shape
    x = T.reshape(x, (c, h // k, k, w // k, k))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    return T.reshape(x, ((h // k) * (w // k), c * k * k))


def _mixer_block(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    normed = T.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    h = T.gelu(T.add_bias(T.matmul(normed, params[f"{prefix}.mlp.w1"]),
                          params[f"{prefix}.mlp.b1"]))
    h = T.add_bias(T.matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return T.add(x, h)


def encode(image: Tensor, cfg: EncoderConfig, params: dict[str, Tensor]) -> list[Tensor]:
    """One modality image (C x H x W) to its 4-level feature pyramid."""
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise TensorError(
            f"encode: expected {cfg.in_channels} x H x W image, got {image.shape}")
    _, h, w = image.shape
    if h % TOTAL_DOWNSAMPLE or w % TOTAL_DOWNSAMPLE:
        raise TensorError(f"encode: {h}x{w} not divisible by {TOTAL_DOWNSAMPLE}")

    pyramid: list[Tensor] = []
    x = image
    for s, (k, c_out) in enumerate(zip(STAGE_DOWNSAMPLE, cfg.stage_channels)):
        h, w = h // k, w // k
        tokens = _merge_patches(x, k)
        tokens = T.add_bias(T.matmul(tokens, params[f"enc.s{s}.patch.w"]),
                            params[f"enc.s{s}.patch.b"])
        for b in range(cfg.blocks_per_stage):
            tokens = _mixer_block(tokens, params, f"enc.s{s}.b{b}")
        x = T.reshape(T.transpose(tokens, (1, 0)), (c_out, h, w))
        pyramid.append(x)
    return pyramid


def encode_batch(images: list[Tensor], cfg: EncoderConfig,
                 params: dict[str, Tensor]) -> list[list[Tensor]]:
    """Encode M modality images with the same weights; output order = input order."""
    if not images:
        raise TensorError("encode_batch: empty modality list")
    sizes = {im.shape for im in images}
    if len(sizes) != 1:
        raise TensorError(f"encode_batch: mismatched image shapes {sorted(sizes)}")
    return [encode(im, cfg, params) for im in images]
