"""Training loop, optimizer, schedule, checkpointing, and config parsing.

The objective is supervision plus beta-weighted consistency, minimized with
decoupled-weight-decay adaptive moments (0.9/0.999, eps 1e-8, decay 0.01).
The learning rate warms up linearly from 10% of base over the first 10% of
steps, then follows polynomial decay with power 0.9.

Checkpoints capture parameters, optimizer moments, epoch, and the exact
shuffle RNG state, so a resumed run is bit-identical to an uninterrupted
one. Config files are INI-style key = value sections.
"""

from __future__ import annotations

import configparser
import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .head import total_loss
from .masm import consistency_loss
from .model import FUSION_MODES, ModelConfig, forward_train, init_model_params
from .tensor import NonFiniteError, Tensor, backward

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01


class CheckpointError(ValueError):
    """Malformed model checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TrainingAbort(RuntimeError):
    """Raised when training hits a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    blocks_per_stage: int = 1
    d_embed: int = 64
    fusion: str = "masm"
    beta: float = 1.0
    base_lr: float = 6e-5
    poly_power: float = 0.9
    warmup_frac: float = 0.1
    epochs: int = 4
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")

    def model_config(self, num_classes: int, modality_names) -> ModelConfig:
        return ModelConfig(num_classes=num_classes,
                           modality_names=tuple(modality_names),
                           stage_channels=self.stage_channels,
                           blocks_per_stage=self.blocks_per_stage,
                           d_embed=self.d_embed)


def load_config(path) -> TrainConfig:
    """Read a [model]/[train] INI file; unknown keys are an error."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    kwargs: dict = {}
    handlers = {
        "model": {
            "stage_channels": lambda v: tuple(int(x) for x in v.split(",")),
            "blocks_per_stage": int,
            "d_embed": int,
        },
        "train": {
            "fusion": str,
            "beta": float,
            "base_lr": float,
            "poly_power": float,
            "warmup_frac": float,
            "epochs": int,
            "batch_size": int,
            "seed": int,
        },
    }
    for section in parser.sections():
        if section not in handlers:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in handlers[section]:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            kwargs[key] = handlers[section][key](raw)
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0.1*base, then polynomial decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = round(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.base_lr * (0.1 + 0.9 * step / warmup)
    if step == total_steps:
        return 0.0
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.base_lr * (1.0 - progress) ** cfg.poly_power


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One decoupled-weight-decay moment update; grad-less params are skipped."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * p.grad * p.grad
        step_dir = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data = p.data - lr * (step_dir + WEIGHT_DECAY * p.data)


# ---------------------------------------------------------------------------
# steps and loop


def batch_losses(batch, model_cfg: ModelConfig, params: dict[str, Tensor],
                 cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(L_M, L_C, L) over a batch of scenes, each a batch-mean."""
    l_m_parts = []
    l_c_parts = []
    for scene in batch:
        l_m, terms, _ = forward_train(scene, model_cfg, params, fusion=cfg.fusion)
        l_m_parts.append(l_m)
        l_c_parts.append(consistency_loss(terms, model_cfg.num_classes))
    l_m = l_m_parts[0]
    l_c = l_c_parts[0]
    for part in l_m_parts[1:]:
        l_m = T.add(l_m, part)
    for part in l_c_parts[1:]:
        l_c = T.add(l_c, part)
    n = float(len(batch))
    l_m = T.div(l_m, n)
    l_c = T.div(l_c, n)
    return l_m, l_c, total_loss(l_m, l_c, cfg.beta)


def train_step(batch, params: dict[str, Tensor], opt: AdamState,
               cfg: TrainConfig, model_cfg: ModelConfig, lr: float
               ) -> dict[str, float]:
    """One forward/backward/update; returns the loss parts."""
    for p in params.values():
        p.zero_grad()
    try:
        l_m, l_c, total = batch_losses(batch, model_cfg, params, cfg)
        parts = {"l_m": l_m.item(), "l_c": l_c.item(), "loss": total.item()}
        backward(total)
    except NonFiniteError as exc:
        T.active_tape().clear()
        raise TrainingAbort(
            f"non-finite loss at optimizer step {opt.step + 1}: {exc}",
            diagnostics={
                "step": opt.step + 1,
                "scene_seeds": [s.seed for s in batch],
                "lr": lr,
                "cause": str(exc),
            }) from exc
    adam_update(params, opt, lr)
    return parts


def train(cfg: TrainConfig, dataset: Dataset, out_dir,
          resume: "Checkpoint | None" = None) -> tuple[dict[str, Tensor], list[dict]]:
    """Full run: shuffle per epoch, log per epoch, checkpoint at the end.

    Returns the trained parameters and the per-epoch log rows.
    """
    if not dataset.scenes:
        raise ValueError("training dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config(dataset.num_classes, dataset.modality_names)

    if resume is not None:
        _check_compat(resume, cfg, model_cfg)
        params = resume.params
        opt = resume.opt
        shuffle_rng = np.random.Generator(np.random.PCG64())
        shuffle_rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        history = list(resume.history)
    else:
        params = init_model_params(model_cfg, cfg.seed)
        opt = AdamState()
        shuffle_rng = np.random.default_rng(cfg.seed)
        start_epoch = 0
        history = []

    scenes = dataset.scenes
    steps_per_epoch = (len(scenes) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch

    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = shuffle_rng.permutation(len(scenes))
            sums = {"l_m": 0.0, "l_c": 0.0, "loss": 0.0}
            lr = cfg.base_lr
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = [scenes[i] for i in idx]
                lr = lr_at(opt.step, total_steps, cfg)
                parts = train_step(batch, params, opt, cfg, model_cfg, lr)
                for key in sums:
                    sums[key] += parts[key]
            row = {"epoch": epoch + 1,
                   "l_m": sums["l_m"] / steps_per_epoch,
                   "l_c": sums["l_c"] / steps_per_epoch,
                   "loss": sums["loss"] / steps_per_epoch,
                   "lr": lr}
            history.append(row)
            _write_log(out / "train_log.csv", history)
            save_checkpoint(out / "model.mmck", Checkpoint(
                config=cfg, num_classes=model_cfg.num_classes,
                modality_names=model_cfg.modality_names, epoch=epoch + 1,
                params=params, opt=opt,
                rng_state=shuffle_rng.bit_generator.state, history=history))
    except TrainingAbort as abort:
        dump = out / "abort_diagnostics.json"
        dump.write_text(json.dumps(abort.diagnostics, indent=2))
        raise
    return params, history


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "l_m", "l_c", "loss", "lr"])
        writer.writeheader()
        writer.writerows(history)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    num_classes: int
    modality_names: tuple[str, ...]
    epoch: int
    params: dict[str, Tensor]
    opt: AdamState
    rng_state: dict
    history: list[dict]


def _check_compat(ckpt: Checkpoint, cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    if ckpt.config != cfg:
        raise CheckpointError("checkpoint was trained with a different config")
    if ckpt.num_classes != model_cfg.num_classes:
        raise CheckpointError(
            f"checkpoint has {ckpt.num_classes} classes, dataset has "
            f"{model_cfg.num_classes}")
    if tuple(ckpt.modality_names) != tuple(model_cfg.modality_names):
        raise CheckpointError(
            f"checkpoint modalities {ckpt.modality_names} do not match dataset "
            f"{model_cfg.modality_names}; refusing to reorder silently")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = list(ckpt.params)
    header = {
        "config": asdict(ckpt.config),
        "num_classes": ckpt.num_classes,
        "modality_names": list(ckpt.modality_names),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.opt.step,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "params": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
        "moments": sorted(ckpt.opt.m),
    }
    raw_header = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(raw_header)))
        fh.write(raw_header)
        for n in names:
            fh.write(ckpt.params[n].data.astype("<f8").tobytes())
        for n in header["moments"]:
            fh.write(ckpt.opt.m[n].astype("<f8").tobytes())
            fh.write(ckpt.opt.v[n].astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointTruncatedError("file shorter than fixed header")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, "
                                     f"reader supports {CKPT_VERSION}")
    if len(blob) < 12 + hlen:
        raise CheckpointTruncatedError("truncated checkpoint header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))

    cfg_fields = dict(header["config"])
    cfg_fields["stage_channels"] = tuple(cfg_fields["stage_channels"])
    cfg = TrainConfig(**cfg_fields)

    offset = 12 + hlen
    params: dict[str, Tensor] = {}
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n_bytes > len(blob):
            raise CheckpointTruncatedError("truncated parameter payload")
        arr = np.frombuffer(blob, dtype="<f8",
                            count=n_bytes // 8, offset=offset).reshape(shape)
        params[meta["name"]] = Tensor(arr.copy(), requires_grad=True)
        offset += n_bytes

    opt = AdamState(step=header["adam_step"])
    for name in header["moments"]:
        shape = params[name].shape
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + 2 * n_bytes > len(blob):
            raise CheckpointTruncatedError("truncated optimizer payload")
        opt.m[name] = np.frombuffer(blob, dtype="<f8", count=n_bytes // 8,
                                    offset=offset).reshape(shape).copy()
        offset += n_bytes
        opt.v[name] = np.frombuffer(blob, dtype="<f8", count=n_bytes // 8,
                                    offset=offset).reshape(shape).copy()
        offset += n_bytes
    if offset != len(blob):
        raise CheckpointTruncatedError(
            f"{len(blob) - offset} unexpected trailing bytes")

    rng_state = header["rng_state"]
    return Checkpoint(config=cfg, num_classes=header["num_classes"],
                      modality_names=tuple(header["modality_names"]),
                      epoch=header["epoch"], params=params, opt=opt,
                      rng_state=rng_state, history=header["history"])
