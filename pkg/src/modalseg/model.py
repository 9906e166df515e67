"""Model assembly: parameter construction and the forward paths.

Training forward: shared encoder on all modalities, similarity-ranked
rectification producing the fused pyramid, decode head, supervision plus
consistency terms. Inference forward: encoder on the available subset,
plain per-scale mean fusion, decode, argmax. The rectification and ranking
machinery never runs at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ModalityScene
from .encoder import PYRAMID_LEVELS, EncoderConfig, encode_batch, init_encoder_params
from .head import cross_entropy, decode, init_head_params
from .masm import RankingResult, masm_forward, mean_feature
from .mim import init_mim_params
from .tensor import Tensor, TensorError

FUSION_MODES = ("masm", "mean")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    modality_names: tuple[str, ...]
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    blocks_per_stage: int = 1
    d_embed: int = 64

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.modality_names) < 1:
            raise ValueError("need at least one modality name")
        if len(set(self.modality_names)) != len(self.modality_names):
            raise ValueError("modality names must be unique")
        EncoderConfig(stage_channels=self.stage_channels,
                      blocks_per_stage=self.blocks_per_stage)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(stage_channels=self.stage_channels,
                             blocks_per_stage=self.blocks_per_stage)


def init_model_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """All trainable tensors for encoder, rectification, and head."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg.encoder, rng)
    params.update(init_mim_params(cfg.stage_channels, rng))
    params.update(init_head_params(cfg.stage_channels, cfg.d_embed,
                                   cfg.num_classes, rng))
    return params


def scene_tensors(scene: ModalityScene) -> list[Tensor]:
    return [Tensor(np.asarray(img, dtype=np.float64)) for img in scene.modalities]


def forward_train(scene: ModalityScene, cfg: ModelConfig,
                  params: dict[str, Tensor], fusion: str = "masm"
                  ) -> tuple[Tensor, list[list[Tensor]], list[RankingResult]]:
    """Supervision loss, consistency terms, and rankings for one scene."""
    if fusion not in FUSION_MODES:
        raise ValueError(f"fusion must be one of {FUSION_MODES}")
    if len(scene.modalities) != len(cfg.modality_names):
        raise TensorError(f"scene has {len(scene.modalities)} modalities, "
                          f"model expects {len(cfg.modality_names)}")
    pyramids = encode_batch(scene_tensors(scene), cfg.encoder, params)
    rankings: list[RankingResult] = []
    if fusion == "masm" and len(pyramids) >= 2:
        fused, rankings, terms = masm_forward(pyramids, params)
    else:
        fused = [mean_feature([p[i] for p in pyramids])
                 for i in range(PYRAMID_LEVELS)]
        terms = [[] for _ in range(PYRAMID_LEVELS)]
    logits = decode(fused, params, scene.labels.shape)
    l_m = cross_entropy(logits, scene.labels)
    return l_m, terms, rankings


def infer_logits(images: list[Tensor], cfg: ModelConfig,
                 params: dict[str, Tensor], out_size: tuple[int, int]) -> Tensor:
    """Mean-fused backbone inference for an arbitrary modality subset."""
    if not images:
        raise TensorError("inference needs at least one modality")
    pyramids = encode_batch(images, cfg.encoder, params)
    fused = [mean_feature([p[i] for p in pyramids]) for i in range(PYRAMID_LEVELS)]
    return decode(fused, params, out_size)


def infer(images: list[Tensor], cfg: ModelConfig, params: dict[str, Tensor],
          out_size: tuple[int, int]) -> np.ndarray:
    """Predicted label map; argmax ties resolve to the lowest class id."""
    with T.no_grad():
        logits = infer_logits(images, cfg, params, out_size)
    return np.argmax(logits.data, axis=0).astype(np.int64)
