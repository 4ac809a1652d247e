import copy
import dataclasses
import itertools
import json
import math
import os

import numpy as np
import pytest
import torch

from ftkd.lib.algorithm.commons import parameter_checksum
from ftkd.lib.algorithm.ftjnf import ModelConfig
from ftkd.lib.errors import ConfigurationError
from ftkd.train.data_utils import crop_batch, crop_example, iter_batches
from ftkd.train.losses import KD_METHODS
from ftkd.train.simulate.corpus import SyntheticCorpus
from ftkd.train.simulate.scene import ArrayGeometry, SceneConfig
from ftkd.train.simulate.simulate import render_example
from ftkd.train.train import (
    SchedulerState,
    StageSpec,
    TrainConfig,
    init_model,
    run_two_stage_kd,
    scheduler_step,
    train_teacher,
)
from ftkd.train.utils import read_jsonl


def make_examples(split, count, seconds=0.5, seed=0):
    corpus = SyntheticCorpus()
    geom = ArrayGeometry.default()
    scene = SceneConfig(example_seconds=seconds)
    return [render_example(corpus, split, i, seed, geom, scene) for i in range(count)]


@pytest.fixture(scope="module")
def tiny_data():
    return make_examples("train", 4), make_examples("val", 2)


def tiny_train_config(**kwargs):
    defaults = dict(batch_size=2, crop_seconds=0.25, max_epochs=2, seed=0)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def brute_force_schedule(improvements, lr=1.0):
    """Replays the plateau and early-stop rules one epoch at a time."""
    streak, trace = 0, []
    for improved in improvements:
        streak = 0 if improved else streak + 1
        if streak in (3, 6, 9):
            lr /= 2
        trace.append((lr, streak >= 6))
        if streak >= 6:
            break
    return trace


def loss_sequence(improvements):
    best, losses = 100.0, []
    for improved in improvements:
        if improved:
            best -= 1.0
            losses.append(best)
        else:
            losses.append(best + (len(losses) % 2))
    return losses


def all_sequences(max_length=10):
    for length in range(1, max_length + 1):
        for rest in itertools.product([True, False], repeat=length - 1):
            yield (True,) + rest


def test_scheduler_matches_brute_force():
    for improvements in all_sequences():
        state = SchedulerState(lr=1.0)
        trace = []
        for loss in loss_sequence(improvements):
            state = scheduler_step(state, loss)
            trace.append((state.lr, state.stop))
            if state.stop:
                break
        assert trace == brute_force_schedule(improvements), improvements


def test_scheduler_matches_reduce_lr_on_plateau():
    for improvements in all_sequences():
        optimizer = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=1.0)
        reference = torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, factor=0.5, patience=2, threshold=0.0)
        state = SchedulerState(lr=1.0)
        for loss in loss_sequence(improvements):
            state = scheduler_step(state, loss)
            reference.step(loss)
            assert state.lr == optimizer.param_groups[0]["lr"], improvements
            if state.stop:
                break


def test_scheduler_thresholds():
    state = SchedulerState(lr=1.0)
    state = scheduler_step(state, 1.0)
    assert state.improved
    for epoch in range(2, 8):
        state = scheduler_step(state, 1.0)
        assert not state.improved
        streak = epoch - 1
        assert state.lr == (1.0 if streak < 3 else 0.5 if streak < 6 else 0.25)
        assert state.stop == (epoch == 7)


def scripted_validation(monkeypatch, losses):
    remaining = iter(losses)
    monkeypatch.setattr("ftkd.train.train.training_loop", lambda *args, **kwargs: (1.0, 0.0))
    monkeypatch.setattr("ftkd.train.train.validation_loop", lambda *args, **kwargs: next(remaining))


def test_run_stage_halves_the_learning_rate_on_plateaus(tiny_data, tmp_path, monkeypatch):
    train, val = tiny_data
    scripted_validation(monkeypatch, [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 1.0, 1.0, 1.0])
    cfg = tiny_train_config(max_epochs=20, lr_init=1e-3, save_every_epoch=False)
    _, history = train_teacher(train, val, ModelConfig.from_preset("I"), cfg, str(tmp_path))
    # halved after the third epoch without improvement, stopped after the sixth
    assert [record["lr"] for record in history] == pytest.approx([1e-3] * 5 + [5e-4] * 3)
    assert len(history) == 8


def test_run_stage_rejects_a_diverging_schedule(tiny_data, tmp_path, monkeypatch):
    train, val = tiny_data
    scripted_validation(monkeypatch, [1.0, 0.9, 0.8])

    def doubled(state, val_loss, *args):
        advanced = scheduler_step(state, val_loss, *args)
        return dataclasses.replace(advanced, lr=2 * advanced.lr)

    monkeypatch.setattr("ftkd.train.train.scheduler_step", doubled)
    with pytest.raises(RuntimeError):
        train_teacher(train, val, ModelConfig.from_preset("I"), tiny_train_config(max_epochs=3), str(tmp_path))


def test_train_teacher_needs_validation_examples(tiny_data, tmp_path):
    train, _ = tiny_data
    with pytest.raises(ValueError):
        train_teacher(train, [], ModelConfig.from_preset("I"), tiny_train_config(), str(tmp_path))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=6, early_stop_patience=6)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="SGD")
    with pytest.raises(ValueError):
        TrainConfig(lr_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_stage_spec_rules():
    teacher = init_model(ModelConfig.from_preset("I"), 0, 0)
    with pytest.raises(ConfigurationError):
        StageSpec(name="stage1", alpha=0.0)
    with pytest.raises(ConfigurationError):
        StageSpec(name="stage2", alpha=1.0, method=KD_METHODS["mask"], teacher=teacher)
    with pytest.raises(ConfigurationError):
        StageSpec(name="mixed", alpha=1.5)
    assert StageSpec(name="mixed", alpha=0.5, method=KD_METHODS["tlstm"], teacher=teacher).alpha == 0.5


def test_crop_batch(tiny_data):
    train, _ = tiny_data
    batch = crop_batch(train, 0.25, 3, np.random.default_rng(0))
    assert batch.y.shape == (3, 5, 4000)
    assert batch.s.shape == (3, 4000)
    assert batch.y.dtype == torch.float32
    assert len(set(batch.ids)) == 3
    assert torch.allclose(batch.y, batch.x + batch.v, atol=1e-5)

    again = crop_batch(train, 0.25, 3, np.random.default_rng(0))
    assert torch.equal(batch.y, again.y)
    assert batch.ids == again.ids


def test_crop_batch_skips_or_pads_short_examples(tiny_data):
    train, _ = tiny_data
    short = make_examples("val", 1, seconds=0.1, seed=1)
    mixed = short + train[:1]
    batch = crop_batch(mixed, 0.25, 2, np.random.default_rng(0))
    assert len(batch) == 1
    assert batch.ids == [train[0].meta["id"]]

    padded = crop_batch(short, 0.25, 1, np.random.default_rng(0), pad_short=True)
    assert padded.y.shape == (1, 5, 4000)
    assert torch.count_nonzero(padded.y[0, :, 1600:]) == 0

    with pytest.raises(ValueError):
        crop_batch(short, 0.25, 1, np.random.default_rng(0))


def test_crop_example_keeps_signals_aligned(tiny_data):
    example = tiny_data[0][0]
    y, x, v, s = crop_example(example, 1000, 500)
    assert np.array_equal(y, example.y[:, 1000:1500])
    assert np.array_equal(s, example.s[1000:1500])


def test_iter_batches_visits_every_example_in_order(tiny_data):
    train, _ = tiny_data
    ids = [i for batch in iter_batches(train, 0.25, 3, np.random.default_rng(0)) for i in batch.ids]
    assert ids == [e.meta["id"] for e in train]


def test_init_is_seeded():
    cfg = ModelConfig.from_preset("I")
    assert parameter_checksum(init_model(cfg, 3, 1)) == parameter_checksum(init_model(cfg, 3, 1))
    assert parameter_checksum(init_model(cfg, 3, 0)) != parameter_checksum(init_model(cfg, 3, 1))


def test_train_teacher_writes_checkpoints(tiny_data, tmp_path):
    train, val = tiny_data
    cfg = tiny_train_config(save_only_latest=True)
    model, history = train_teacher(train, val, ModelConfig.from_preset("I"), cfg, str(tmp_path))
    assert [record["epoch"] for record in history] == [1, 2]
    assert all(math.isfinite(record["val_loss"]) for record in history)
    assert read_jsonl(str(tmp_path / "metrics.jsonl")) == history
    assert os.path.isfile(tmp_path / "best.pth")
    assert os.path.isfile(tmp_path / "model_002.pth")
    assert not os.path.exists(tmp_path / "model_001.pth")
    with open(tmp_path / "best.json") as f:
        best = json.load(f)
    assert best["val_loss"] == min(record["val_loss"] for record in history)


def test_training_is_deterministic(tiny_data, tmp_path):
    train, val = tiny_data
    cfg = tiny_train_config()
    model_cfg = ModelConfig.from_preset("I")
    first, _ = train_teacher(train, val, model_cfg, cfg, str(tmp_path / "a"))
    second, _ = train_teacher(train, val, model_cfg, cfg, str(tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert parameter_checksum(first) == parameter_checksum(second)


def test_two_stage_kd(tiny_data, tmp_path):
    train, val = tiny_data
    cfg = tiny_train_config()
    teacher = init_model(ModelConfig.from_preset("G"), 0, 0)
    before = parameter_checksum(teacher)

    student, histories = run_two_stage_kd(
        teacher, ModelConfig.from_preset("I"), "tlstm", train, val, cfg, str(tmp_path)
    )
    assert parameter_checksum(teacher) == before
    assert student.cfg.size_label == "I"
    assert [r["stage"] for r in histories["stage1"]] == ["stage1", "stage1"]
    # fresh optimizer at the initial learning rate when stage 2 starts
    assert histories["stage2"][0]["lr"] == cfg.lr_init
    for stage in ("stage1", "stage2"):
        assert os.path.isfile(tmp_path / stage / "best.pth")
        assert os.path.isfile(tmp_path / stage / "metrics.jsonl")


def test_kd_mask_from_identical_weights_has_zero_soft_loss(tiny_data, tmp_path):
    train, val = tiny_data
    cfg = tiny_train_config()
    teacher = init_model(ModelConfig.from_preset("I"), 0, 0)
    _, histories = run_two_stage_kd(
        teacher,
        teacher.cfg,
        "mask",
        train,
        val,
        cfg,
        str(tmp_path),
        student=copy.deepcopy(teacher),
    )
    assert all(record["val_loss"] == 0.0 for record in histories["stage1"])


def test_flstm_kd_with_equal_sizes_runs(tiny_data, tmp_path):
    train, val = tiny_data
    teacher = init_model(ModelConfig.from_preset("I"), 0, 0)
    _, histories = run_two_stage_kd(
        teacher, teacher.cfg, "flstm", train, val, tiny_train_config(max_epochs=1), str(tmp_path)
    )
    assert len(histories["stage1"]) == 1


@pytest.mark.slow
@pytest.mark.parametrize("method", ["linear", "tlstm", "multi"])
def test_tiny_distillation_reduces_losses(method, tmp_path):
    train = make_examples("train", 20, seconds=1.0)
    val = make_examples("val", 5, seconds=1.0)
    cfg = tiny_train_config(batch_size=4, crop_seconds=0.5, max_epochs=20)
    teacher, _ = train_teacher(
        train, val, ModelConfig.from_preset("G"), tiny_train_config(batch_size=4, crop_seconds=0.5, max_epochs=5),
        str(tmp_path / "teacher"),
    )
    before = parameter_checksum(teacher)
    _, histories = run_two_stage_kd(teacher, ModelConfig.from_preset("I"), method, train, val, cfg, str(tmp_path))
    assert parameter_checksum(teacher) == before
    for stage in ("stage1", "stage2"):
        losses = [record["train_loss"] for record in histories[stage]]
        assert min(losses) <= 0.7 * losses[0], (stage, losses)


@pytest.mark.slow
def test_teacher_overfits_a_small_split(tmp_path):
    train = make_examples("train", 8)
    val = make_examples("val", 2)
    cfg = tiny_train_config(
        crop_seconds=0.5, max_epochs=30, lr_init=3e-3, plateau_patience=10, early_stop_patience=30,
        save_every_epoch=False,
    )
    _, history = train_teacher(train, val, ModelConfig.from_preset("I"), cfg, str(tmp_path))
    assert len(history) == 30
    losses = [record["train_loss"] for record in history]
    assert min(losses) <= 0.5 * losses[0], losses
