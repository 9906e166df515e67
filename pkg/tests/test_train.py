"""Training loop: schedule, optimizer step semantics, checkpoints, abort."""

from __future__ import annotations

import numpy as np
import pytest

from modalseg.data import generate_dataset, generate_scene
from modalseg.model import init_model_params
from modalseg.train import (AdamState, Checkpoint, CheckpointError,
                            CheckpointTruncatedError, CheckpointVersionError,
                            TrainConfig, TrainingAbort, load_checkpoint,
                            load_config, lr_at, save_checkpoint, train,
                            train_step)

MODALITIES = ("camera", "depth", "event", "range")

TINY = TrainConfig(stage_channels=(4, 6, 8, 10), d_embed=8, beta=1.0,
                   base_lr=1e-2, warmup_frac=0.0, epochs=1, batch_size=2, seed=3)


def tiny_setup(k=3, seed=42):
    scene = generate_scene(seed, 32, 32, k, m=4, p_night=0.5)
    mcfg = TINY.model_config(k, MODALITIES)
    params = init_model_params(mcfg, 0)
    return scene, mcfg, params


def param_bytes(params):
    return {n: p.data.tobytes() for n, p in params.items()}


# ---------------------------------------------------------------------------
# schedule


def test_lr_warmup_start_is_tenth_of_base():
    cfg = TrainConfig()
    assert lr_at(0, 100, cfg) == pytest.approx(0.1 * cfg.base_lr, rel=1e-12)


def test_lr_at_warmup_end_is_base():
    cfg = TrainConfig()
    assert lr_at(10, 100, cfg) == pytest.approx(cfg.base_lr, rel=1e-12)


def test_lr_final_step_is_zero():
    cfg = TrainConfig()
    assert abs(lr_at(100, 100, cfg)) < 1e-12


def test_lr_decay_matches_polynomial():
    cfg = TrainConfig()
    expect = cfg.base_lr * (1.0 - 45 / 90) ** 0.9
    assert lr_at(55, 100, cfg) == pytest.approx(expect, rel=1e-12)


def test_lr_monotone_segments():
    cfg = TrainConfig()
    ramp = [lr_at(s, 100, cfg) for s in range(0, 11)]
    assert all(a < b for a, b in zip(ramp, ramp[1:]))
    decay = [lr_at(s, 100, cfg) for s in range(10, 101)]
    assert all(a > b for a, b in zip(decay, decay[1:]))


def test_lr_step_out_of_range():
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        lr_at(-1, 100, cfg)
    with pytest.raises(ValueError):
        lr_at(101, 100, cfg)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-0.5)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_frac=1.0)
    with pytest.raises(ValueError):
        TrainConfig(poly_power=0.0)
    with pytest.raises(ValueError):
        TrainConfig(fusion="concat")


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "train.ini"
    path.write_text("""
[model]
stage_channels = 4,6,8,10
blocks_per_stage = 2
d_embed = 16

[train]
fusion = mean
beta = 0.5
base_lr = 1e-3
epochs = 7
batch_size = 3
seed = 11
""")
    cfg = load_config(path)
    assert cfg.stage_channels == (4, 6, 8, 10)
    assert cfg.blocks_per_stage == 2
    assert cfg.d_embed == 16
    assert cfg.fusion == "mean"
    assert cfg.beta == 0.5
    assert cfg.base_lr == 1e-3
    assert cfg.epochs == 7
    assert cfg.batch_size == 3
    assert cfg.seed == 11
    assert cfg.poly_power == 0.9  # untouched default


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nmomentum = 0.9\n")
    with pytest.raises(ValueError):
        load_config(path)
    path.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ValueError):
        load_config(path)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.ini")


# ---------------------------------------------------------------------------
# step semantics


def test_beta_zero_total_equals_supervision():
    scene, _, _ = tiny_setup()
    cfg = TrainConfig(stage_channels=(4, 6, 8, 10), d_embed=8, beta=0.0,
                      base_lr=1e-3, epochs=1, batch_size=1, seed=0)
    mcfg = cfg.model_config(3, MODALITIES)
    params = init_model_params(mcfg, 0)
    parts = train_step([scene], params, AdamState(), cfg, mcfg, lr=1e-3)
    assert parts["loss"] == parts["l_m"]


def test_zero_lr_leaves_params_bit_identical():
    scene, mcfg, params = tiny_setup()
    before = param_bytes(params)
    train_step([scene], params, AdamState(), TINY, mcfg, lr=0.0)
    after = param_bytes(params)
    assert before == after


def test_overfit_single_scene():
    scene, mcfg, params = tiny_setup()
    opt = AdamState()
    first = None
    for _ in range(50):
        parts = train_step([scene], params, opt, TINY, mcfg, lr=1e-2)
        first = first or parts
    assert parts["l_m"] < 0.2 * first["l_m"], (
        f"no overfit: {first['l_m']:.4f} -> {parts['l_m']:.4f}")


def poison(params):
    """Make the head fusion matmul overflow to inf on the next forward."""
    params["head.proj0.b"].data = np.full(params["head.proj0.b"].shape, 1e200)
    params["head.fuse.w"].data = np.full(params["head.fuse.w"].shape, 1e200)


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_loss_aborts_with_diagnostics():
    scene, mcfg, params = tiny_setup()
    poison(params)
    with pytest.raises(TrainingAbort) as exc:
        train_step([scene], params, AdamState(), TINY, mcfg, lr=1e-3)
    diag = exc.value.diagnostics
    assert diag["step"] == 1
    assert diag["scene_seeds"] == [scene.seed]


# ---------------------------------------------------------------------------
# full runs


def small_dataset(count=4, seed=5):
    return generate_dataset(seed, count=count, h=32, w=32, k=3, m=4, p_night=0.5)


def test_training_is_deterministic(tmp_path):
    ds = small_dataset()
    cfg = TrainConfig(stage_channels=(4, 6, 8, 10), d_embed=8, epochs=2,
                      batch_size=2, base_lr=1e-3, seed=9)
    params_a, hist_a = train(cfg, ds, tmp_path / "a")
    params_b, hist_b = train(cfg, ds, tmp_path / "b")
    assert hist_a == hist_b  # exact float equality
    assert param_bytes(params_a) == param_bytes(params_b)


def test_train_writes_log_and_checkpoint(tmp_path):
    ds = small_dataset()
    cfg = TrainConfig(stage_channels=(4, 6, 8, 10), d_embed=8, epochs=2,
                      batch_size=2, base_lr=1e-3, seed=9)
    _, history = train(cfg, ds, tmp_path / "run")
    log = (tmp_path / "run" / "train_log.csv").read_text().strip().splitlines()
    assert log[0] == "epoch,l_m,l_c,loss,lr"
    assert len(log) == 1 + len(history) == 3
    assert (tmp_path / "run" / "model.mmck").exists()


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_abort_writes_diagnostics_file(tmp_path):
    ds = small_dataset(count=2)
    cfg = TrainConfig(stage_channels=(4, 6, 8, 10), d_embed=8, epochs=1,
                      batch_size=2, base_lr=1e-3, seed=9)
    mcfg = cfg.model_config(ds.num_classes, ds.modality_names)
    params = init_model_params(mcfg, cfg.seed)
    poison(params)
    poisoned = Checkpoint(config=cfg, num_classes=ds.num_classes,
                          modality_names=tuple(ds.modality_names), epoch=0,
                          params=params, opt=AdamState(),
                          rng_state=np.random.default_rng(9).bit_generator.state,
                          history=[])
    with pytest.raises(TrainingAbort):
        train(cfg, ds, tmp_path / "run", resume=poisoned)
    assert (tmp_path / "run" / "abort_diagnostics.json").exists()


# ---------------------------------------------------------------------------
# checkpoints


def trained_state(steps=3):
    ds = small_dataset(count=2)
    cfg = TrainConfig(stage_channels=(4, 6, 8, 10), d_embed=8, epochs=1,
                      batch_size=2, base_lr=1e-3, seed=9)
    mcfg = cfg.model_config(ds.num_classes, ds.modality_names)
    params = init_model_params(mcfg, cfg.seed)
    opt = AdamState()
    for _ in range(steps):
        train_step(ds.scenes, params, opt, cfg, mcfg, lr=1e-3)
    rng = np.random.default_rng(cfg.seed)
    rng.permutation(4)  # advance so the saved state is mid-stream
    ckpt = Checkpoint(config=cfg, num_classes=ds.num_classes,
                      modality_names=tuple(ds.modality_names), epoch=1,
                      params=params, opt=opt, rng_state=rng.bit_generator.state,
                      history=[{"epoch": 1, "l_m": 1.0, "l_c": 0.1,
                                "loss": 1.1, "lr": 1e-3}])
    return ds, cfg, mcfg, ckpt, rng


def test_checkpoint_round_trip_bit_exact(tmp_path):
    _, cfg, _, ckpt, rng = trained_state()
    path = tmp_path / "model.mmck"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.config == cfg
    assert back.num_classes == ckpt.num_classes
    assert back.modality_names == ckpt.modality_names
    assert back.epoch == ckpt.epoch
    assert back.opt.step == ckpt.opt.step
    assert back.history == ckpt.history
    assert param_bytes(back.params) == param_bytes(ckpt.params)
    for name in ckpt.opt.m:
        assert back.opt.m[name].tobytes() == ckpt.opt.m[name].tobytes()
        assert back.opt.v[name].tobytes() == ckpt.opt.v[name].tobytes()
    restored = np.random.Generator(np.random.PCG64())
    restored.bit_generator.state = back.rng_state
    assert np.array_equal(restored.permutation(1000), rng.permutation(1000))


def test_resume_step_matches_uninterrupted_step(tmp_path):
    ds, cfg, mcfg, ckpt, _ = trained_state()
    path = tmp_path / "model.mmck"
    save_checkpoint(path, ckpt)

    train_step(ds.scenes, ckpt.params, ckpt.opt, cfg, mcfg, lr=5e-4)
    uninterrupted = param_bytes(ckpt.params)

    resumed = load_checkpoint(path)
    train_step(ds.scenes, resumed.params, resumed.opt, cfg, mcfg, lr=5e-4)
    assert param_bytes(resumed.params) == uninterrupted


def test_checkpoint_bad_magic(tmp_path):
    _, _, _, ckpt, _ = trained_state()
    path = tmp_path / "model.mmck"
    save_checkpoint(path, ckpt)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    _, _, _, ckpt, _ = trained_state()
    path = tmp_path / "model.mmck"
    save_checkpoint(path, ckpt)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (9).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    _, _, _, ckpt, _ = trained_state()
    path = tmp_path / "model.mmck"
    save_checkpoint(path, ckpt)
    blob = path.read_bytes()
    path.write_bytes(blob[:-64])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_resume_rejects_wrong_modality_count(tmp_path):
    _, cfg, _, ckpt, _ = trained_state()
    ds3 = generate_dataset(5, count=2, h=32, w=32, k=3, m=3, p_night=0.5)
    with pytest.raises(CheckpointError):
        train(cfg, ds3, tmp_path / "run", resume=ckpt)


def test_resume_rejects_reordered_modalities(tmp_path):
    ds, cfg, _, ckpt, _ = trained_state()
    reordered = type(ds)(num_classes=ds.num_classes,
                         modality_names=tuple(reversed(ds.modality_names)),
                         scenes=[type(s)(seed=s.seed, condition=s.condition,
                                         modalities=list(reversed(s.modalities)),
                                         labels=s.labels) for s in ds.scenes])
    with pytest.raises(CheckpointError):
        train(cfg, reordered, tmp_path / "run", resume=ckpt)
