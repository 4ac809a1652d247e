import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

from tqdm import tqdm

from ftkd.eval.metrics import MetricResult, pesq_external, si_sdr, spectral_l1
from ftkd.infer.infer import enhance
from ftkd.lib.algorithm.ftjnf import ModelConfig, count_macs_per_frame, count_params
from ftkd.lib.algorithm.stft import StftConfig
from ftkd.lib.errors import PesqAdapterError
from ftkd.train.process.extract_model import load_model
from ftkd.train.simulate.simulate import render_example
from ftkd.train.utils import append_jsonl

logger = logging.getLogger(__name__)

NOISY = "noisy"
TEACHER = "teacher"
SNR_TOLERANCE = 1e-9


@dataclass
class EvalProtocol:
    """
    One evaluation run: every model sees exactly the same test examples.

    Args:
        snr_grid (tuple): SNR buckets in dB.
        models (dict): Label to FTJNF instance or container path.
        examples (list): MixtureExamples whose snr_db lies on the grid.
    """

    snr_grid: tuple
    models: dict
    examples: list
    seed: int = 0
    stft_cfg: StftConfig = StftConfig()
    center_index: int = 4
    pesq_adapter: Optional[str] = None
    si_sdr_cap: float = 60.0
    size_sweep_snr: float = 0.0
    _loaded: dict = field(default_factory=dict, repr=False)

    def model(self, label):
        if label not in self._loaded:
            entry = self.models[label]
            self._loaded[label] = load_model(entry) if isinstance(entry, str) else entry
        return self._loaded[label]


def example_digest(example):
    """sha256 of the noisy and clean signals of an example."""
    digest = hashlib.sha256()
    digest.update(example.y.tobytes())
    digest.update(example.s.tobytes())
    return digest.hexdigest()


def build_test_examples(corpus, geom, scene, snr_grid, per_snr, seed):
    """
    Test examples generated in memory, identical to the rendered test split
    of the simulate command for the same seed and grid.
    """
    examples = []
    for bucket, snr in enumerate(snr_grid):
        for i in range(per_snr):
            examples.append(render_example(corpus, "test", bucket * per_snr + i, seed, geom, scene, float(snr)))
    return examples


def examples_by_snr(examples, snr_grid):
    buckets = {float(snr): [] for snr in snr_grid}
    for example in examples:
        for snr in buckets:
            if abs(example.snr_db - snr) <= SNR_TOLERANCE:
                buckets[snr].append(example)
                break
    for snr, members in buckets.items():
        if not members:
            logger.warning(f"No test examples at {snr} dB")
    return buckets


def _example_id(example, index):
    return example.meta.get("id", f"example_{index:05d}")


def evaluate_cell(label, estimator, examples, snr_db, protocol):
    """
    Score one model on one list of examples.

    Returns:
        list: MetricResult for si_sdr, spectral_l1 and (with an adapter) pesq.
    """
    results = {
        "si_sdr": MetricResult("si_sdr", label, snr_db),
        "spectral_l1": MetricResult("spectral_l1", label, snr_db),
    }
    if protocol.pesq_adapter:
        results["pesq"] = MetricResult("pesq", label, snr_db)

    for index, example in enumerate(tqdm(examples, desc=f"{label} @ {snr_db} dB", leave=False)):
        example_id = _example_id(example, index)
        estimate = estimator(example)
        results["si_sdr"].add(example_id, si_sdr(estimate, example.s, cap=protocol.si_sdr_cap))
        results["spectral_l1"].add(example_id, spectral_l1(estimate, example.s, protocol.stft_cfg))
        if "pesq" in results:
            try:
                results["pesq"].add(example_id, pesq_external(estimate, example.s, protocol.pesq_adapter))
            except PesqAdapterError as error:
                logger.error(f"PESQ failed for {example_id}: {error}")
                results["pesq"].errors.append({"id": example_id, "error": str(error)})
    return list(results.values())


def _noisy_estimator(protocol):
    return lambda example: example.y[protocol.center_index]


def _model_estimator(model, protocol):
    return lambda example: enhance(model, example.y, protocol.stft_cfg, protocol.center_index)


def run_snr_sweep(protocol, records_path=None):
    """
    Score the unprocessed center microphone and every model at every SNR bucket.

    Args:
        protocol (EvalProtocol): Models and paired test examples.
        records_path (str, optional): Each cell's records are appended here as soon as they exist.

    Returns:
        list: Record dicts, one per (model, snr, metric).
    """
    if not protocol.models:
        raise ValueError("run_snr_sweep needs at least one model")
    if not protocol.examples:
        raise ValueError("run_snr_sweep needs test examples")

    if records_path and os.path.exists(records_path):
        os.remove(records_path)

    _log_pesq_status(protocol)
    buckets = examples_by_snr(protocol.examples, protocol.snr_grid)
    digests = [example_digest(example) for example in protocol.examples]
    logger.info(f"Evaluating {len(protocol.models)} model(s) on {len(protocol.examples)} paired examples")

    estimators = [(NOISY, _noisy_estimator(protocol))]
    estimators += [(label, _model_estimator(protocol.model(label), protocol)) for label in protocol.models]

    records = []
    for label, estimator in estimators:
        for snr, examples in buckets.items():
            if not examples:
                continue
            for result in evaluate_cell(label, estimator, examples, snr, protocol):
                record = result.to_record()
                record["protocol"] = "snr"
                record["example_sha256"] = [example_digest(e) for e in examples]
                records.append(record)
                if records_path:
                    append_jsonl(records_path, record)

    logger.info(f"Paired test set digest: {hashlib.sha256(''.join(digests).encode()).hexdigest()}")
    return records


def _log_pesq_status(protocol):
    if not protocol.pesq_adapter:
        logger.info("No PESQ adapter configured; PESQ is skipped")


def _summary_fields(results):
    row = {}
    for result in results:
        row[f"{result.metric}_median"] = result.median
        row[f"{result.metric}_variance"] = result.variance
    return row


def run_size_sweep(protocol, sizes, methods, cells, teacher=None, records_path=None):
    """
    Score (size, method) students against compute cost at one SNR.

    Args:
        protocol (EvalProtocol): Provides the examples and size_sweep_snr.
        sizes (list): Preset labels, e.g. ["B", ..., "I"].
        methods (list): KD method names, "none" for the baseline.
        cells (dict): (size, method) to FTJNF or container path; missing cells are reported absent.
        teacher (FTJNF or str, optional): Reference model for the extra teacher row.

    Returns:
        list: |sizes| * |methods| rows, plus one teacher row.
    """
    snr = float(protocol.size_sweep_snr)
    examples = examples_by_snr(protocol.examples, [snr])[snr]
    if not examples:
        raise ValueError(f"No test examples at {snr} dB for the size sweep")
    num_bins = protocol.stft_cfg.num_bins
    _log_pesq_status(protocol)

    if records_path and os.path.exists(records_path):
        os.remove(records_path)

    def describe(cfg, label, method, entry, model=None):
        row = {
            "protocol": "size",
            "size": label,
            "method": method,
            "snr_db": snr,
            "params": count_params(cfg),
            "macs_per_frame": count_macs_per_frame(cfg, num_bins),
            "file_size_mb": os.path.getsize(entry) / 1e6 if isinstance(entry, str) and os.path.isfile(entry) else None,
            "absent": entry is None,
        }
        if entry is not None:
            if model is None:
                model = load_model(entry) if isinstance(entry, str) else entry
            results = evaluate_cell(f"{label}/{method}", _model_estimator(model, protocol), examples, snr, protocol)
            row.update(_summary_fields(results))
        return row

    rows = []
    for size in sizes:
        cfg = ModelConfig.from_preset(size)
        for method in methods:
            entry = cells.get((size, method))
            if entry is None:
                logger.warning(f"No model for size {size} / {method}; reported as absent")
            rows.append(describe(cfg, size, method, entry))
            if records_path:
                append_jsonl(records_path, rows[-1])

    teacher_model = load_model(teacher) if isinstance(teacher, str) else teacher
    teacher_cfg = teacher_model.cfg if teacher_model is not None else ModelConfig.from_preset("A")
    rows.append(describe(teacher_cfg, teacher_cfg.size_label or "A", TEACHER, teacher, teacher_model))
    if records_path:
        append_jsonl(records_path, rows[-1])
    return rows
