import os
import sys
import glob
import logging
import argparse

now_dir = os.getcwd()
sys.path.append(now_dir)

from ftkd.configs.config import (
    ENV_PREFIX,
    load_run_config,
    parse_set_arguments,
    save_run_config,
)
from ftkd.lib.errors import ConfigurationError
from ftkd.lib.utils import format_title

logger = logging.getLogger(__name__)

PRESET_CHOICES = ["A", "B", "C", "D", "E", "F", "G", "H", "I"]
KD_CHOICES = ["mask", "linear", "flstm", "tlstm", "multi", "none"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def setup_logging():
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    for name in ("matplotlib", "PIL", "numba"):
        logging.getLogger(name).setLevel(logging.WARNING)


def dataset_dir_for(hps):
    return hps.data.dataset_dir or os.path.join(hps.out_dir, "dataset")


def teacher_path_for(hps):
    return hps.kd.teacher_model or os.path.join(hps.out_dir, "teacher", "best.pth")


def student_dir_for(hps, size_label, method):
    return os.path.join(hps.out_dir, "students", format_title(f"{size_label}_{method}"))


def size_label_of(model_cfg):
    return model_cfg.size_label or f"f{model_cfg.f_hidden}t{model_cfg.t_hidden}"


def loss_settings_for(hps):
    from ftkd.lib.algorithm.stft import StftConfig
    from ftkd.train.simulate.scene import ArrayGeometry
    from ftkd.train.train import LossSettings

    return LossSettings(
        stft_cfg=StftConfig.from_hparams(hps.stft),
        center_index=ArrayGeometry.from_hparams(hps.geometry).center_index,
        gram_block=hps.kd.gram_block,
        normalize_rows=bool(hps.kd.normalize_rows),
    )


# Simulate
def run_simulate_script(hps, overwrite=False):
    from ftkd.train.simulate.simulate import MANIFEST_NAME, SPLIT_IDS, simulate_dataset

    dataset_dir = dataset_dir_for(hps)
    done = all(os.path.isfile(os.path.join(dataset_dir, split, MANIFEST_NAME)) for split in SPLIT_IDS)
    if done and not overwrite:
        logger.info(f"Dataset already rendered at {dataset_dir}; pass --overwrite to render again")
        return dataset_dir

    os.makedirs(dataset_dir, exist_ok=True)
    save_run_config(hps, dataset_dir)
    simulate_dataset(hps, dataset_dir)
    return dataset_dir


def _load_train_val(hps):
    from ftkd.train.data_utils import load_split

    dataset_dir = dataset_dir_for(hps)
    return load_split(dataset_dir, "train"), load_split(dataset_dir, "val")


# Train teacher
def run_train_teacher_script(hps, overwrite=False):
    from ftkd.lib.algorithm.ftjnf import ModelConfig
    from ftkd.train.train import TrainConfig, train_teacher

    out_dir = os.path.join(hps.out_dir, "teacher")
    best_path = os.path.join(out_dir, "best.pth")
    if os.path.isfile(best_path) and not overwrite:
        logger.info(f"Teacher already trained at {best_path}; pass --overwrite to train again")
        return best_path

    model_cfg = ModelConfig.from_preset(
        hps.kd.teacher_preset,
        num_mics=int(hps.model.num_mics),
        f_bidirectional=bool(hps.model.f_bidirectional),
        compress_exponent=hps.model.compress_exponent,
    )
    train_cfg = TrainConfig.from_hparams(hps.train, seed=hps.seed)
    train_examples, val_examples = _load_train_val(hps)

    os.makedirs(out_dir, exist_ok=True)
    save_run_config(hps, out_dir)
    train_teacher(train_examples, val_examples, model_cfg, train_cfg, out_dir, loss_settings_for(hps))
    return best_path


def check_enabled_taps(hps, method):
    from ftkd.train.losses import resolve_method

    kd_method = resolve_method(method)
    missing = [tap for tap in kd_method.taps if tap not in hps.kd.enabled_taps]
    if missing:
        raise ConfigurationError(
            f"{kd_method.label} needs taps {', '.join(missing)}, which kd.enabled_taps disables"
        )
    return kd_method


# Distill
def run_distill_script(hps, overwrite=False):
    from ftkd.lib.algorithm.ftjnf import ModelConfig
    from ftkd.train.process.extract_model import load_model, save_model
    from ftkd.train.train import TrainConfig, run_two_stage_kd, train_teacher

    method = hps.kd.method
    student_cfg = ModelConfig.from_hparams(hps.model)
    out_dir = student_dir_for(hps, size_label_of(student_cfg), method)
    student_path = os.path.join(out_dir, "student.pth")
    if os.path.isfile(student_path) and not overwrite:
        logger.info(f"Student already trained at {student_path}; pass --overwrite to train again")
        return student_path

    train_cfg = TrainConfig.from_hparams(hps.train, seed=hps.seed)
    settings = loss_settings_for(hps)

    if method == "none":
        train_examples, val_examples = _load_train_val(hps)
        os.makedirs(out_dir, exist_ok=True)
        save_run_config(hps, out_dir)
        student, _ = train_teacher(
            train_examples,
            val_examples,
            student_cfg,
            train_cfg,
            os.path.join(out_dir, "baseline"),
            settings,
            name="baseline",
        )
        stage = "baseline"
    else:
        check_enabled_taps(hps, method)
        teacher_path = teacher_path_for(hps)
        if not os.path.isfile(teacher_path):
            raise FileNotFoundError(f"No teacher at {teacher_path}; run train-teacher first or set kd.teacher_model")
        teacher = load_model(teacher_path, device=train_cfg.device)
        train_examples, val_examples = _load_train_val(hps)
        os.makedirs(out_dir, exist_ok=True)
        save_run_config(hps, out_dir)
        student, _ = run_two_stage_kd(
            teacher, student_cfg, method, train_examples, val_examples, train_cfg, out_dir, settings
        )
        stage = "stage2"

    save_model(student, student_path, name=os.path.basename(out_dir), stage=stage)
    print(f"    ██████  Student saved to {student_path}")
    return student_path


def find_students(hps):
    """(size label, method) -> student container path for every finished student."""
    cells = {}
    for path in sorted(glob.glob(os.path.join(hps.out_dir, "students", "*", "student.pth"))):
        name = os.path.basename(os.path.dirname(path))
        size, _, method = name.rpartition("_")
        if size and method in KD_CHOICES:
            cells[(size, method)] = path
    return cells


def build_protocol(hps, models):
    from ftkd.eval.protocol import EvalProtocol, build_test_examples
    from ftkd.lib.algorithm.stft import StftConfig
    from ftkd.train.data_utils import load_split
    from ftkd.train.simulate.corpus import build_corpus
    from ftkd.train.simulate.scene import ArrayGeometry, SceneConfig
    from ftkd.train.simulate.simulate import MANIFEST_NAME

    geom = ArrayGeometry.from_hparams(hps.geometry)
    dataset_dir = dataset_dir_for(hps)
    if os.path.isfile(os.path.join(dataset_dir, "test", MANIFEST_NAME)):
        examples = load_split(dataset_dir, "test")
    else:
        logger.info("No rendered test split; generating the test examples in memory")
        examples = build_test_examples(
            build_corpus(hps),
            geom,
            SceneConfig.from_hparams(hps.scene),
            hps.eval.snr_grid,
            int(hps.eval.examples_per_snr),
            hps.seed,
        )
    return EvalProtocol(
        snr_grid=tuple(float(snr) for snr in hps.eval.snr_grid),
        models=models,
        examples=examples,
        seed=hps.seed,
        stft_cfg=StftConfig.from_hparams(hps.stft),
        center_index=geom.center_index,
        pesq_adapter=hps.pesq_adapter,
        si_sdr_cap=float(hps.eval.si_sdr_cap),
        size_sweep_snr=float(hps.eval.size_sweep_snr),
    )


# Evaluate
def run_evaluate_script(hps, overwrite=False):
    from ftkd.eval.protocol import TEACHER, run_size_sweep, run_snr_sweep
    from ftkd.eval.report import SIZE_RECORDS, SNR_RECORDS, build_report

    eval_dir = os.path.join(hps.out_dir, "eval")
    snr_path = os.path.join(eval_dir, SNR_RECORDS)
    size_path = os.path.join(eval_dir, SIZE_RECORDS)
    if os.path.isfile(snr_path) and os.path.isfile(size_path) and not overwrite:
        logger.info(f"Evaluation records already exist in {eval_dir}; pass --overwrite to evaluate again")
        return build_report(eval_dir)

    teacher_path = teacher_path_for(hps)
    students = find_students(hps)
    models = {}
    if os.path.isfile(teacher_path):
        models[TEACHER] = teacher_path
    else:
        logger.warning(f"No teacher at {teacher_path}; the teacher row is left out")
    for (size, method), path in students.items():
        models[f"{size}/{method}"] = path
    if not models:
        raise FileNotFoundError(f"No trained models under {hps.out_dir}; run train-teacher or distill first")

    os.makedirs(eval_dir, exist_ok=True)
    save_run_config(hps, eval_dir)
    protocol = build_protocol(hps, models)
    run_snr_sweep(protocol, records_path=snr_path)
    run_size_sweep(
        protocol,
        sizes=list(hps.eval.sizes),
        methods=list(hps.eval.methods),
        cells=students,
        teacher=protocol.model(TEACHER) if TEACHER in models else None,
        records_path=size_path,
    )
    return build_report(eval_dir)


# Report
def run_report_script(hps):
    from ftkd.eval.report import build_report

    written = build_report(os.path.join(hps.out_dir, "eval"))
    for path in written:
        print(path)
    return written


def count_table(num_bins=257):
    from ftkd.lib.algorithm.ftjnf import (
        PRESETS,
        REFERENCE_SIZES,
        ModelConfig,
        count_macs_per_frame,
        count_params,
        nominal_size_mb,
    )

    lines = [
        f"{'size':<6}{'F/T':>10}{'params':>10}{'reference':>12}{'delta':>9}"
        f"{'GMACs':>9}{'ref GMACs':>11}{'MB':>8}{'ref MB':>8}"
    ]
    for label in PRESETS:
        cfg = ModelConfig.from_preset(label)
        params = count_params(cfg)
        ref_params, ref_gmacs, ref_mb = REFERENCE_SIZES[label]
        delta = 100.0 * (params - ref_params) / ref_params
        gmacs = count_macs_per_frame(cfg, num_bins) / 1e9
        lines.append(
            f"{label:<6}{f'{cfg.f_hidden}/{cfg.t_hidden}':>10}{params:>10}{int(ref_params):>12}{delta:>+8.2f}%"
            f"{gmacs:>9.3f}{ref_gmacs:>11.2f}{nominal_size_mb(cfg):>8.2f}{ref_mb:>8.2f}"
        )
    return lines


# Count params
def run_count_params_script(hps, model_path=None):
    from ftkd.lib.algorithm.stft import StftConfig
    from ftkd.train.process.extract_model import describe_model

    if model_path:
        print(describe_model(model_path))
        return
    for line in count_table(StftConfig.from_hparams(hps.stft).num_bins):
        print(line)


def add_common_arguments(parser):
    parser.add_argument("--config", type=str, help="JSON config file with a partial or full run config.", default=None)
    parser.add_argument("--seed", type=int, help="Global run seed.", default=None)
    parser.add_argument("--out", type=str, help="Output directory of the run.", default=None)
    parser.add_argument("--synthetic", action="store_true", help="Use generated speech, noise and RIRs.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help=f"Override a config value; repeatable. Environment variables {ENV_PREFIX}SECTION__KEY take precedence.",
    )
    parser.add_argument("--overwrite", action="store_true", help="Redo the step even if its outputs exist.")


def parse_arguments(argv=None):
    parser = argparse.ArgumentParser(description="Train and distill FT-JNF speech enhancement models.")
    subparsers = parser.add_subparsers(title="subcommands", dest="mode", help="Choose a mode")
    subparsers.required = True

    simulate_parser = subparsers.add_parser("simulate", help="Render the train/val/test mixtures.")
    add_common_arguments(simulate_parser)

    teacher_parser = subparsers.add_parser("train-teacher", help="Train the teacher on the hard loss.")
    add_common_arguments(teacher_parser)
    teacher_parser.add_argument("--preset", type=str, choices=PRESET_CHOICES, help="Teacher size.", default=None)

    distill_parser = subparsers.add_parser("distill", help="Train a student with two-stage KD or the no-KD baseline.")
    add_common_arguments(distill_parser)
    distill_parser.add_argument("--preset", type=str, choices=PRESET_CHOICES, help="Student size.", default=None)
    distill_parser.add_argument("--kd", type=str, choices=KD_CHOICES, help="KD method.", default=None)

    evaluate_parser = subparsers.add_parser("evaluate", help="Score every trained model on the paired test set.")
    add_common_arguments(evaluate_parser)
    evaluate_parser.add_argument("--pesq-adapter", type=str, help="External wideband PESQ program.", default=None)

    report_parser = subparsers.add_parser("report", help="Rebuild tables and plots from evaluation records.")
    add_common_arguments(report_parser)

    count_parser = subparsers.add_parser("count-params", help="Print parameter and MAC counts for presets A-I.")
    add_common_arguments(count_parser)
    count_parser.add_argument("--model", type=str, help="Describe a model container instead.", default=None)

    return parser.parse_args(argv)


def collect_overrides(args):
    overrides = parse_set_arguments(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.synthetic:
        overrides["synthetic"] = True
    preset = getattr(args, "preset", None)
    if preset is not None:
        overrides["kd.teacher_preset" if args.mode == "train-teacher" else "model.preset"] = preset
    if getattr(args, "kd", None) is not None:
        overrides["kd.method"] = args.kd
    if getattr(args, "pesq_adapter", None) is not None:
        overrides["pesq_adapter"] = args.pesq_adapter
    return overrides


def main(argv=None):
    setup_logging()
    args = parse_arguments(argv)

    try:
        hps = load_run_config(args.config, collect_overrides(args))
        if args.mode == "simulate":
            run_simulate_script(hps, overwrite=args.overwrite)
        elif args.mode == "train-teacher":
            run_train_teacher_script(hps, overwrite=args.overwrite)
        elif args.mode == "distill":
            run_distill_script(hps, overwrite=args.overwrite)
        elif args.mode == "evaluate":
            run_evaluate_script(hps, overwrite=args.overwrite)
        elif args.mode == "report":
            run_report_script(hps)
        elif args.mode == "count-params":
            run_count_params_script(hps, model_path=args.model)
    except ConfigurationError as error:
        print(f"Configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as error:
        print(f"An error occurred during execution: {error}")

        import traceback

        traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
