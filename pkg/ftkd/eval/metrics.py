import logging
import math
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ftkd.lib.algorithm.stft import StftConfig, stft
from ftkd.lib.errors import DegenerateInputError, PesqAdapterError, ShapeMismatchError
from ftkd.lib.utils import SAMPLE_RATE, save_audio

logger = logging.getLogger(__name__)

SI_SDR_CAP = 60.0
PESQ_RANGE = (-0.5, 4.5)


def si_sdr(estimate, reference, cap=SI_SDR_CAP):
    """
    Scale-invariant signal-to-distortion ratio in dB, after removing the mean.

    Results are clamped to [-cap, cap]; a perfect or perfectly scaled
    estimate returns cap.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ShapeMismatchError(f"estimate {estimate.shape} and reference {reference.shape} differ")
    estimate = estimate - estimate.mean()
    reference = reference - reference.mean()

    reference_energy = float(np.dot(reference, reference))
    if reference_energy <= 0.0:
        raise DegenerateInputError("si_sdr reference has zero energy")
    scale = float(np.dot(estimate, reference)) / reference_energy
    target = scale * reference
    distortion = estimate - target

    target_energy = float(np.dot(target, target))
    distortion_energy = float(np.dot(distortion, distortion))
    if target_energy <= 0.0:
        # silent or orthogonal estimate
        return -cap
    if distortion_energy <= target_energy * 10.0 ** (-cap / 10.0):
        return cap
    return max(min(10.0 * math.log10(target_energy / distortion_energy), cap), -cap)


def spectral_l1(estimate, reference, cfg=StftConfig()):
    """Mean absolute difference of STFT magnitudes."""
    estimate = torch.as_tensor(np.asarray(estimate, dtype=np.float64))
    reference = torch.as_tensor(np.asarray(reference, dtype=np.float64))
    if estimate.shape != reference.shape:
        raise ShapeMismatchError(f"estimate {tuple(estimate.shape)} and reference {tuple(reference.shape)} differ")
    return float(torch.mean(torch.abs(stft(estimate, cfg).abs() - stft(reference, cfg).abs())))


def adapter_command(adapter):
    """Python scripts run with the current interpreter, anything else is executed directly."""
    if adapter.endswith(".py"):
        return [sys.executable, adapter]
    return [adapter]


def pesq_external(estimate, reference, adapter, sample_rate=SAMPLE_RATE, timeout=120):
    """
    Wideband PESQ through an external adapter.

    The adapter is called as `adapter REF.wav DEG.wav` and must print one
    decimal score in [-0.5, 4.5].

    Returns:
        float or None: None when no adapter is configured.
    """
    if not adapter:
        return None
    with tempfile.TemporaryDirectory(prefix="ftkd_pesq_") as tmp_dir:
        ref_path = os.path.join(tmp_dir, "ref.wav")
        deg_path = os.path.join(tmp_dir, "deg.wav")
        save_audio(ref_path, reference, sample_rate, subtype="FLOAT")
        save_audio(deg_path, estimate, sample_rate, subtype="FLOAT")
        try:
            result = subprocess.run(
                adapter_command(adapter) + [ref_path, deg_path],
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as error:
            raise PesqAdapterError(f"PESQ adapter failed to run: {error}") from error

    if result.returncode != 0:
        raise PesqAdapterError(f"PESQ adapter exited with {result.returncode}: {result.stderr.strip()}")
    output = result.stdout.strip()
    try:
        score = float(output)
    except ValueError as error:
        raise PesqAdapterError(f"PESQ adapter printed {output!r}, expected a single number") from error
    if not PESQ_RANGE[0] <= score <= PESQ_RANGE[1]:
        raise PesqAdapterError(f"PESQ score {score} outside {PESQ_RANGE}")
    return score


@dataclass
class MetricResult:
    """Per-example values of one metric for one (model, SNR) cell."""

    metric: str
    model: str
    snr_db: Optional[float]
    values: list = field(default_factory=list)
    example_ids: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def add(self, example_id, value):
        self.example_ids.append(example_id)
        self.values.append(float(value))

    @property
    def median(self):
        return float(np.median(self.values)) if self.values else None

    @property
    def variance(self):
        """Population variance."""
        return float(np.var(self.values)) if self.values else None

    def to_record(self):
        return {
            "metric": self.metric,
            "model": self.model,
            "snr_db": self.snr_db,
            "median": self.median,
            "variance": self.variance,
            "count": len(self.values),
            "values": self.values,
            "example_ids": self.example_ids,
            "errors": self.errors,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            metric=record["metric"],
            model=record["model"],
            snr_db=record["snr_db"],
            values=list(record["values"]),
            example_ids=list(record["example_ids"]),
            errors=list(record.get("errors", [])),
        )
