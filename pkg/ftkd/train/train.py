import copy
import datetime
import logging
import math
import os
from dataclasses import asdict, dataclass
from time import time as ttime
from typing import Optional

import numpy as np
import torch
import torch_optimizer
from torch import nn
from torch.nn.utils import clip_grad_norm_
from torch.utils.tensorboard import SummaryWriter
from tqdm import tqdm

from ftkd.lib.algorithm.commons import freeze, grad_norm, parameter_checksum
from ftkd.lib.algorithm.ftjnf import FTJNF, apply_mask, count_params, featurize
from ftkd.lib.algorithm.stft import StftConfig, istft, stft
from ftkd.lib.errors import ConfigurationError, NonFiniteError
from ftkd.lib.utils import derive_rng, derive_seed
from ftkd.train.data_utils import crop_batch, iter_batches
from ftkd.train.losses import (
    KDMethod,
    combined_loss,
    hard_loss,
    resolve_method,
    soft_loss,
    tap_tensor,
)
from ftkd.train.process.extract_model import save_model
from ftkd.train.utils import append_jsonl, summarize, write_json

logger = logging.getLogger(__name__)

OPTIMIZERS = ("Adam", "AdamW", "RAdam")

# Crop stream per stage; the no-KD baseline shares the stage-2 stream.
STAGE_STREAMS = {"teacher": 0, "stage1": 1, "stage2": 2, "baseline": 2}
TEACHER_INIT, STUDENT_INIT = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 5e-4
    batch_size: int = 4
    crop_seconds: float = 4.0
    max_epochs: int = 100
    plateau_patience: int = 3
    early_stop_patience: int = 6
    lr_factor: float = 0.5
    optimizer: str = "Adam"
    grad_clip: Optional[float] = None
    save_every_epoch: bool = True
    save_only_latest: bool = False
    pad_short: bool = False
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        for name in ("lr_init", "batch_size", "crop_seconds", "max_epochs", "plateau_patience", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.plateau_patience >= self.early_stop_patience:
            raise ValueError("train.plateau_patience must be smaller than train.early_stop_patience")
        if not 0 < self.lr_factor < 1:
            raise ValueError("train.lr_factor must be in (0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"train.optimizer must be one of {', '.join(OPTIMIZERS)}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("train.grad_clip must be positive or null")

    @classmethod
    def from_hparams(cls, hps, seed=0):
        return cls(
            lr_init=float(hps.lr_init),
            batch_size=int(hps.batch_size),
            crop_seconds=float(hps.crop_seconds),
            max_epochs=int(hps.max_epochs),
            plateau_patience=int(hps.plateau_patience),
            early_stop_patience=int(hps.early_stop_patience),
            lr_factor=float(hps.lr_factor),
            optimizer=str(hps.optimizer),
            grad_clip=None if hps.grad_clip is None else float(hps.grad_clip),
            save_every_epoch=bool(hps.save_every_epoch),
            save_only_latest=bool(hps.save_only_latest),
            pad_short=bool(hps.pad_short),
            seed=int(seed),
            device=str(hps.device),
        )


@dataclass(frozen=True)
class LossSettings:
    stft_cfg: StftConfig = StftConfig()
    center_index: int = 4
    gram_block: str = "frame"
    normalize_rows: bool = False


@dataclass
class StageSpec:
    """
    One optimization phase: alpha 1 trains on the hard loss alone, alpha 0
    on the soft loss against a frozen teacher.
    """

    name: str
    alpha: float
    method: Optional[KDMethod] = None
    teacher: Optional[nn.Module] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        needs_teacher = self.alpha < 1.0
        if needs_teacher and (self.teacher is None or self.method is None):
            raise ConfigurationError(f"stage '{self.name}' with alpha={self.alpha} needs a teacher and a KD method")
        if not needs_teacher and (self.teacher is not None or self.method is not None):
            raise ConfigurationError(f"stage '{self.name}' trains on the hard loss only; drop the teacher and method")


@dataclass(frozen=True)
class CheckpointRecord:
    stage: str
    epoch: int
    val_loss: float
    lr: float
    path: str


@dataclass(frozen=True)
class SchedulerState:
    lr: float
    best: float = math.inf
    streak: int = 0
    stop: bool = False
    epoch: int = 0

    @property
    def improved(self):
        return self.epoch > 0 and self.streak == 0


def scheduler_step(state, val_loss, plateau_patience=3, early_stop_patience=6, factor=0.5):
    """
    Advance the plateau/early-stop state machine by one epoch.

    A strictly lower validation loss resets the non-improvement streak.
    The learning rate is multiplied by factor whenever the streak reaches a
    multiple of plateau_patience, and the stop flag is raised once it
    reaches early_stop_patience.

    run_stage applies the learning rate through ReduceLROnPlateau and
    checks every epoch that both agree.
    """
    epoch = state.epoch + 1
    if val_loss < state.best:
        return SchedulerState(lr=state.lr, best=val_loss, streak=0, stop=False, epoch=epoch)
    streak = state.streak + 1
    lr = state.lr * factor if streak % plateau_patience == 0 else state.lr
    return SchedulerState(lr=lr, best=state.best, streak=streak, stop=streak >= early_stop_patience, epoch=epoch)


def check_scheduler_agreement(optimizer, state, epoch):
    """The optimizer's learning rate, set by ReduceLROnPlateau, must equal the state machine's."""
    for group in optimizer.param_groups:
        if not math.isclose(group["lr"], state.lr, rel_tol=1e-12, abs_tol=0.0):
            raise RuntimeError(
                f"epoch {epoch}: optimizer lr {group['lr']:.6e} disagrees with the plateau rule ({state.lr:.6e})"
            )


class EpochRecorder:
    """
    Records the time elapsed per epoch.
    """

    def __init__(self):
        self.last_time = ttime()

    def record(self):
        """
        Records the elapsed time and returns a formatted string.
        """
        now_time = ttime()
        elapsed_time = now_time - self.last_time
        self.last_time = now_time
        elapsed_time_str = str(datetime.timedelta(seconds=int(round(elapsed_time, 1))))
        return f"Time per epoch: {elapsed_time_str}"


def resolve_device(name):
    if name.startswith("cuda") and not torch.cuda.is_available():
        print("No GPU detected, fallback to CPU.")
        return torch.device("cpu")
    return torch.device(name)


def build_optimizer(name, params, lr):
    if name == "Adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "AdamW":
        return torch.optim.AdamW(params, lr=lr)
    if name == "RAdam":
        return torch_optimizer.RAdam(params, lr=lr)
    raise ValueError(f"Unknown optimizer: {name}")


def model_features(model, y_spec):
    return featurize(y_spec, model.cfg.num_mics, model.cfg.compress_exponent)


def stage_loss(student, batch, stage, settings):
    """
    Loss of one batch under a stage's alpha.

    The enhanced signal is istft(mask * Y_center); teacher taps are computed
    without gradients.
    """
    y_spec = stft(batch.y, settings.stft_cfg)
    taps_s = student(model_features(student, y_spec))
    zero = torch.zeros((), dtype=batch.s.dtype, device=batch.s.device)
    hard = soft = zero

    if stage.alpha > 0.0:
        s_hat = istft(
            apply_mask(taps_s.mask, y_spec[:, settings.center_index]),
            settings.stft_cfg,
            length=batch.s.shape[-1],
        )
        hard = hard_loss(s_hat, batch.s, settings.stft_cfg)

    if stage.alpha < 1.0:
        with torch.no_grad():
            taps_t = stage.teacher(model_features(stage.teacher, y_spec))
        soft = soft_loss(stage.method, taps_t, taps_s, settings.gram_block, settings.normalize_rows)

    return combined_loss(hard, soft, stage.alpha)


def training_loop(model, optimizer, examples, stage, cfg, settings, rng, device):
    """
    One epoch of ceil(n / batch_size) randomly cropped batches.

    Returns:
        tuple: (mean training loss, mean gradient norm)
    """
    model.train()
    num_batches = math.ceil(len(examples) / cfg.batch_size)
    total, count, norms = 0.0, 0, []

    with tqdm(total=num_batches, leave=False, desc=f"{stage.name} train") as pbar:
        for _ in range(num_batches):
            batch = crop_batch(examples, cfg.crop_seconds, cfg.batch_size, rng, pad_short=cfg.pad_short).to(device)
            optimizer.zero_grad(set_to_none=True)
            loss = stage_loss(model, batch, stage, settings)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"{stage.name}: non-finite training loss on {', '.join(batch.ids)}")
            loss.backward()
            norms.append(grad_norm(model))
            if cfg.grad_clip is not None:
                clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            total += loss.item() * len(batch)
            count += len(batch)
            pbar.set_postfix(loss=f"{loss.item():.4f}")
            pbar.update(1)

    return total / count, float(np.mean(norms))


def validation_loop(model, examples, stage, cfg, settings, device):
    """Mean stage loss over every validation example, cropped identically in each epoch."""
    model.eval()
    rng = derive_rng(cfg.seed, "val", STAGE_STREAMS.get(stage.name, 0))
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in iter_batches(examples, cfg.crop_seconds, cfg.batch_size, rng, pad_short=cfg.pad_short):
            batch = batch.to(device)
            loss = stage_loss(model, batch, stage, settings)
            total += loss.item() * len(batch)
            count += len(batch)
    model.train()
    return total / count


def run_stage(model, stage, train_examples, val_examples, cfg, settings, stage_dir, model_name="model"):
    """
    Train until early stop or max_epochs, keeping the best validation snapshot.

    Writes model_XXX.pth snapshots, best.pth, best.json, metrics.jsonl and
    tensorboard summaries under stage_dir/eval. The model holds the best
    weights on return.

    Returns:
        tuple: (list of per-epoch metric records, CheckpointRecord of the best epoch)
    """
    if not train_examples:
        raise ValueError("the training split is empty")
    if not val_examples:
        raise ValueError("the validation split is empty")

    device = next(model.parameters()).device
    os.makedirs(stage_dir, exist_ok=True)
    metrics_path = os.path.join(stage_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    writer_eval = SummaryWriter(log_dir=os.path.join(stage_dir, "eval"))

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = build_optimizer(cfg.optimizer, params, cfg.lr_init)
    state = SchedulerState(lr=cfg.lr_init)
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=cfg.lr_factor,
        patience=cfg.plateau_patience - 1,
        threshold=0.0,
        eps=0.0,
    )
    crop_rng = derive_rng(cfg.seed, "crop", STAGE_STREAMS.get(stage.name, 0))

    print(f"    ██████  Stage: {stage.name} (alpha={stage.alpha})")
    if stage.method is not None:
        print(f"    ██████  KD method: {stage.method.label} ({stage.method.fusion} on {', '.join(stage.method.taps)})")
    print(f"    ██████  Optimizer used: {cfg.optimizer}, lr={cfg.lr_init}")
    print(f"    ██████  Parameters: {count_params(model.cfg)} on {device}")

    history = []
    best_state = copy.deepcopy(model.state_dict())
    best_record = None
    previous_snapshot = None
    epoch_recorder = EpochRecorder()

    for epoch in range(1, cfg.max_epochs + 1):
        lr = optimizer.param_groups[0]["lr"]

        train_loss, mean_grad_norm = training_loop(
            model, optimizer, train_examples, stage, cfg, settings, crop_rng, device
        )
        val_loss = validation_loop(model, val_examples, stage, cfg, settings, device)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"{stage.name}: non-finite validation loss at epoch {epoch}")
        state = scheduler_step(state, val_loss, cfg.plateau_patience, cfg.early_stop_patience, cfg.lr_factor)
        plateau.step(val_loss)
        check_scheduler_agreement(optimizer, state, epoch)

        record = {"epoch": epoch, "stage": stage.name, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        append_jsonl(metrics_path, record)
        history.append(record)
        summarize(
            writer=writer_eval,
            global_step=epoch,
            scalars={
                "loss/train": train_loss,
                "loss/val": val_loss,
                "learning_rate": lr,
                "grad/norm_total": mean_grad_norm,
            },
        )

        if cfg.save_every_epoch:
            snapshot = os.path.join(stage_dir, f"model_{epoch:03d}.pth")
            save_model(model, snapshot, name=model_name, epoch=epoch, stage=stage.name)
            if cfg.save_only_latest and previous_snapshot and os.path.exists(previous_snapshot):
                os.remove(previous_snapshot)
            previous_snapshot = snapshot

        if state.improved:
            best_state = copy.deepcopy(model.state_dict())
            best_path = save_model(model, os.path.join(stage_dir, "best.pth"), name=model_name, epoch=epoch, stage=stage.name)
            best_record = CheckpointRecord(stage=stage.name, epoch=epoch, val_loss=val_loss, lr=lr, path=best_path)
            write_json(os.path.join(stage_dir, "best.json"), asdict(best_record))

        print(
            f"{model_name} | {stage.name} | epoch={epoch} | train={train_loss:.5f} | val={val_loss:.5f} "
            f"| lr={lr:.2e} | {epoch_recorder.record()}"
        )

        if state.stop:
            print(f"    ██████  Early stop after {state.streak} epochs without improvement.")
            break

    writer_eval.flush()
    writer_eval.close()
    model.load_state_dict(best_state)
    return history, best_record


def init_model(model_cfg, seed, stream, device="cpu"):
    """Build a network whose initial weights depend only on (seed, stream)."""
    torch.manual_seed(derive_seed(seed, "init", stream))
    return FTJNF(model_cfg).to(device)


def train_teacher(train_examples, val_examples, model_cfg, cfg, out_dir, settings=LossSettings(), name="teacher"):
    """
    Supervised training on the hard loss alone (alpha 1).

    Also trains the no-KD baseline students when called with name="baseline".

    Returns:
        tuple: (model with the best validation weights, history)
    """
    if not val_examples:
        raise ValueError("the validation split is empty")
    device = resolve_device(cfg.device)
    stream = TEACHER_INIT if name == "teacher" else STUDENT_INIT
    model = init_model(model_cfg, cfg.seed, stream, device)
    stage = StageSpec(name=name, alpha=1.0)
    history, _ = run_stage(model, stage, train_examples, val_examples, cfg, settings, out_dir, model_name=name)
    return model, history


def check_method_compatibility(teacher, student, method):
    """Dry-run both networks on a tiny input and verify the method's taps can be compared."""
    if teacher.cfg.num_mics != student.cfg.num_mics:
        raise ConfigurationError("teacher and student expect different microphone counts")
    zeros_input = torch.zeros(1, 2, 3, teacher.cfg.input_width, device=next(teacher.parameters()).device)
    with torch.no_grad():
        taps_t = teacher(zeros_input)
        taps_s = student(zeros_input.to(next(student.parameters()).device))
    for name in method.taps:
        shape_t = tap_tensor(taps_t, name).shape
        shape_s = tap_tensor(taps_s, name).shape
        if method.fusion == "direct" and shape_t != shape_s:
            raise ConfigurationError(
                f"{method.label} matches '{name}' directly but teacher {tuple(shape_t)} and student {tuple(shape_s)} differ"
            )
        if shape_t[:-1] != shape_s[:-1]:
            raise ConfigurationError(f"{method.label}: '{name}' row layouts differ")


def run_two_stage_kd(
    teacher,
    student_cfg,
    method,
    train_examples,
    val_examples,
    cfg,
    out_dir,
    settings=LossSettings(),
    student=None,
    name="student",
):
    """
    Distill a student in two stages.

    Stage 1 minimizes the soft loss (alpha 0) with the teacher frozen. Stage 2
    restarts from the stage-1 best weights with a fresh optimizer at lr_init
    and minimizes the hard loss (alpha 1).

    Args:
        teacher (FTJNF): Trained teacher; frozen here and never modified.
        student_cfg (ModelConfig): Student sizes.
        method (str or KDMethod): KD method.
        out_dir (str): Receives stage1/ and stage2/.
        student (FTJNF, optional): Start from this network instead of a fresh one.

    Returns:
        tuple: (student with the stage-2 best weights, {"stage1": history, "stage2": history})
    """
    method = resolve_method(method)
    device = resolve_device(cfg.device)
    teacher = freeze(teacher.to(device))
    checksum = parameter_checksum(teacher)

    if student is None:
        student = init_model(student_cfg, cfg.seed, STUDENT_INIT, device)
    else:
        student = student.to(device)
        for param in student.parameters():
            param.requires_grad_(True)
    check_method_compatibility(teacher, student, method)
    if count_params(student.cfg) >= count_params(teacher.cfg):
        logger.warning("The student is not smaller than the teacher")

    stage1 = StageSpec(name="stage1", alpha=0.0, method=method, teacher=teacher)
    history1, best1 = run_stage(
        student, stage1, train_examples, val_examples, cfg, settings, os.path.join(out_dir, "stage1"), name
    )
    logger.info(f"Stage 1 best epoch {best1.epoch} (soft loss {best1.val_loss:.5f})")

    stage2 = StageSpec(name="stage2", alpha=1.0)
    history2, best2 = run_stage(
        student, stage2, train_examples, val_examples, cfg, settings, os.path.join(out_dir, "stage2"), name
    )
    logger.info(f"Stage 2 best epoch {best2.epoch} (hard loss {best2.val_loss:.5f})")

    if parameter_checksum(teacher) != checksum:
        raise RuntimeError("teacher parameters changed during distillation")
    return student, {"stage1": history1, "stage2": history2}
