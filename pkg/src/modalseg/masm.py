"""Modality selection by cosine ranking, per-scale fusion, consistency loss.

At every pyramid level the M modality features are ranked by cosine
similarity to their arithmetic mean. The most and least similar (robust and
fragile) are cross-rectified by the interaction module; the result plus the
mean feature is the fused level. The remaining modalities supply mapped
similarities for a symmetric divergence penalty that pulls them toward the
fused feature. All of this is training-time machinery; inference fuses by
plain averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mim import mim_forward
from .tensor import Tensor, TensorError

SIM_EPS = 1e-6  # floor for mapped similarities before logs
NORM_EPS = 1e-12  # below this a feature counts as zero for cosine


@dataclass(frozen=True)
class RankingResult:
    """Per-scale outcome of the similarity ranking."""

    scale: int
    scores: tuple[float, ...]
    robust_idx: int
    fragile_idx: int
    remaining: tuple[int, ...]  # descending score, excludes robust and fragile


def mean_feature(features: list[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of M equal-shape features."""
    if not features:
        raise TensorError("mean_feature: empty feature list")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise TensorError(f"mean_feature: shape mismatch {f.shape} vs {shape}")
    total = features[0]
    for f in features[1:]:
        total = T.add(total, f)
    return T.div(total, float(len(features)))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two equal-size features; 0 when either is ~zero."""
    if a.size != b.size:
        raise TensorError(f"cosine: size mismatch {a.shape} vs {b.shape}")
    af = T.reshape(a, (a.size,))
    bf = T.reshape(b, (b.size,))
    na = T.sqrt(T.sum_all(T.mul(af, af)))
    nb = T.sqrt(T.sum_all(T.mul(bf, bf)))
    if na.item() < NORM_EPS or nb.item() < NORM_EPS:
        return Tensor(0.0)
    return T.div(T.sum_all(T.mul(af, bf)), T.mul(na, nb))


def rank_modalities(features: list[Tensor], f_m: Tensor) -> RankingResult:
    """Stable descending sort of cosine scores; first is robust, last fragile."""
    if len(features) < 2:
        raise TensorError("rank_modalities: need at least 2 modalities")
    with T.no_grad():
        scores = tuple(cosine(f, f_m).item() for f in features)
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return RankingResult(scale=0, scores=scores, robust_idx=order[0],
                         fragile_idx=order[-1], remaining=tuple(order[1:-1]))


def map_similarity(c: Tensor) -> Tensor:
    """[-1,1] cosine -> [eps,1] so the divergence logs stay defined."""
    return T.clamp(T.mul(T.add(c, 1.0), 0.5), SIM_EPS, 1.0)


def masm_forward(pyramids: list[list[Tensor]], params: dict[str, Tensor]
                 ) -> tuple[list[Tensor], list[RankingResult], list[list[Tensor]]]:
    """Rank, rectify, and fuse every pyramid level of one sample.

    Returns the fused pyramid, per-scale rankings, and per-scale mapped
    similarities of the remaining modalities against the fused pair feature
    (rank order), for the consistency loss.
    """
    if len(pyramids) < 2:
        raise TensorError("masm_forward: training requires at least 2 modalities")
    levels = len(pyramids[0])
    fused: list[Tensor] = []
    rankings: list[RankingResult] = []
    terms: list[list[Tensor]] = []
    for i in range(levels):
        features = [pyr[i] for pyr in pyramids]
        f_m = mean_feature(features)
        rank = rank_modalities(features, f_m)
        rank = RankingResult(scale=i + 1, scores=rank.scores,
                             robust_idx=rank.robust_idx,
                             fragile_idx=rank.fragile_idx,
                             remaining=rank.remaining)
        f_mim = mim_forward(features[rank.robust_idx], features[rank.fragile_idx],
                            params, level=i)
        fused.append(T.add(f_mim, f_m))
        terms.append([map_similarity(cosine(features[j], f_mim))
                      for j in rank.remaining])
        rankings.append(rank)
    return fused, rankings, terms


def consistency_loss(terms: list[list[Tensor]], class_count: int) -> Tensor:
    """Symmetric divergence of the first two remaining similarities per scale.

    Each contributing scale adds K * [c1*log(c1/m) + c2*log(c2/m)] with m the
    midpoint; scales with fewer than two remaining modalities contribute
    nothing. Returns the mean over contributing scales, or exact 0.
    """
    if class_count < 1:
        raise TensorError("consistency_loss: class_count must be positive")
    per_scale: list[Tensor] = []
    for scale_terms in terms:
        if len(scale_terms) < 2:
            continue
        c1, c2 = scale_terms[0], scale_terms[1]
        mid = T.mul(T.add(c1, c2), 0.5)
        contrib = T.add(T.mul(c1, T.log(T.div(c1, mid))),
                        T.mul(c2, T.log(T.div(c2, mid))))
        per_scale.append(T.mul(contrib, float(class_count)))
    if not per_scale:
        return Tensor(0.0)
    total = per_scale[0]
    for loss in per_scale[1:]:
        total = T.add(total, loss)
    return T.div(total, float(len(per_scale)))
