"""Subset-exhaustive evaluation: every non-empty modality combination is
scored with mean-fusion inference, one confusion matrix per subset over the
whole split, mIoU per subset, and the plain average as the headline number.

Report rows follow the subset order size-then-lexicographic, e.g. for
camera/depth/event/range: C, D, E, R, CD, CE, ..., CDER, then Mean.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .encoder import encode_batch
from .head import IGNORE_LABEL
from .masm import mean_feature, rank_modalities
from .model import ModelConfig, infer, scene_tensors

MAX_MODALITIES = 8


def enumerate_subsets(m: int) -> list[tuple[int, ...]]:
    """All non-empty index subsets, ordered by size then lexicographically."""
    if not 1 <= m <= MAX_MODALITIES:
        raise ValueError(f"modality count must be in [1, {MAX_MODALITIES}]")
    out: list[tuple[int, ...]] = []
    for size in range(1, m + 1):
        out.extend(itertools.combinations(range(m), size))
    return out


def subset_name(subset, modality_names) -> str:
    return "".join(modality_names[i][0].upper() for i in subset)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    """K x K counts (rows ground truth, cols prediction), 255 pixels skipped."""
    if gt.shape != pred.shape:
        raise ValueError(f"label grids differ: {gt.shape} vs {pred.shape}")
    gt = gt.ravel().astype(np.int64)
    pred = pred.ravel().astype(np.int64)
    valid = gt != IGNORE_LABEL
    gt, pred = gt[valid], pred[valid]
    if gt.size and (gt.min() < 0 or gt.max() >= k):
        raise ValueError(f"ground-truth labels outside [0, {k})")
    if pred.size and (pred.min() < 0 or pred.max() >= k):
        raise ValueError(f"predicted labels outside [0, {k})")
    return np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def miou(cm: np.ndarray) -> float:
    """Mean IoU percent over classes present in GT or prediction."""
    if cm.sum() == 0:
        raise ValueError("mIoU undefined: no scored pixels")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not np.any(present):
        raise ValueError("mIoU undefined: every class union is zero")
    return float(np.mean(tp[present] / union[present]) * 100.0)


@dataclass(frozen=True)
class MassReport:
    modality_names: tuple[str, ...]
    subset_names: tuple[str, ...]
    scores: tuple[float, ...]  # mIoU percent, enumerate_subsets order
    mean: float


# ---------------------------------------------------------------------------
# evaluation


def run_mass_eval(cfg: ModelConfig, params, dataset: Dataset,
                  predictor=None) -> MassReport:
    """Score every modality subset across the split.

    ``predictor(images, scene) -> label map`` can replace model inference
    (used by oracle tests); by default the model predicts.
    """
    if tuple(dataset.modality_names) != tuple(cfg.modality_names):
        raise ValueError(
            f"dataset modalities {tuple(dataset.modality_names)} do not match "
            f"model {tuple(cfg.modality_names)}")
    if not dataset.scenes:
        raise ValueError("evaluation split is empty")
    subsets = enumerate_subsets(len(cfg.modality_names))
    k = dataset.num_classes
    cms = [np.zeros((k, k), dtype=np.int64) for _ in subsets]
    for scene in dataset.scenes:
        images = scene_tensors(scene)
        for si, subset in enumerate(subsets):
            picked = [images[i] for i in subset]
            if predictor is None:
                pred = infer(picked, cfg, params, scene.labels.shape)
            else:
                pred = predictor(picked, scene)
            cms[si] += confusion_matrix(scene.labels, pred, k)
    scores = tuple(miou(cm) for cm in cms)
    names = tuple(subset_name(s, dataset.modality_names) for s in subsets)
    return MassReport(modality_names=tuple(dataset.modality_names),
                      subset_names=names, scores=scores,
                      mean=float(np.mean(scores)))


# ---------------------------------------------------------------------------
# rendering and persistence


def render_report(report: MassReport, fmt: str) -> str:
    cells = [f"{s:.2f}" for s in report.scores] + [f"{report.mean:.2f}"]
    headers = list(report.subset_names) + ["Mean"]
    if fmt == "markdown":
        lines = ["| " + " | ".join(headers) + " |",
                 "|" + "|".join("---" for _ in headers) + "|",
                 "| " + " | ".join(cells) + " |"]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        return ",".join(headers) + "\n" + ",".join(cells) + "\n"
    raise ValueError(f"format must be 'markdown' or 'csv', got {fmt!r}")


def report_to_json(report: MassReport) -> str:
    return json.dumps({
        "modality_names": list(report.modality_names),
        "subsets": [{"name": n, "miou": s}
                    for n, s in zip(report.subset_names, report.scores)],
        "mean": report.mean,
    }, indent=2)


def report_from_json(text: str) -> MassReport:
    raw = json.loads(text)
    names = tuple(entry["name"] for entry in raw["subsets"])
    scores = tuple(float(entry["miou"]) for entry in raw["subsets"])
    return MassReport(modality_names=tuple(raw["modality_names"]),
                      subset_names=names, scores=scores, mean=float(raw["mean"]))


# ---------------------------------------------------------------------------
# ranking diagnostics


def rankings_csv(cfg: ModelConfig, params, dataset: Dataset) -> str:
    """Per-sample, per-scale ranking table for offline inspection."""
    if len(dataset.modality_names) < 2:
        raise ValueError("ranking dump needs at least 2 modalities")
    lines = ["sample,scale,modality,cosine,robust,fragile"]
    with T.no_grad():
        for sample_idx, scene in enumerate(dataset.scenes):
            pyramids = encode_batch(scene_tensors(scene), cfg.encoder, params)
            for level in range(len(pyramids[0])):
                features = [pyr[level] for pyr in pyramids]
                rank = rank_modalities(features, mean_feature(features))
                for mod_idx, name in enumerate(dataset.modality_names):
                    lines.append(
                        f"{sample_idx},{level + 1},{name},"
                        f"{rank.scores[mod_idx]:.6f},"
                        f"{int(mod_idx == rank.robust_idx)},"
                        f"{int(mod_idx == rank.fragile_idx)}")
    return "\n".join(lines) + "\n"
