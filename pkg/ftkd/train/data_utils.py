import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from ftkd.lib.utils import SAMPLE_RATE, load_audio
from ftkd.train.simulate.scene import MixtureExample, SourcePosition
from ftkd.train.simulate.simulate import MANIFEST_NAME
from ftkd.train.utils import read_jsonl

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """Aligned crops: y, x, v are (B, M, N), s is (B, N)."""

    y: torch.Tensor
    x: torch.Tensor
    v: torch.Tensor
    s: torch.Tensor
    ids: list

    def to(self, device):
        return Batch(self.y.to(device), self.x.to(device), self.v.to(device), self.s.to(device), self.ids)

    def __len__(self):
        return self.y.shape[0]


def load_split(dataset_dir, split):
    """
    Load a rendered split into memory as MixtureExamples, in manifest order.

    Args:
        dataset_dir (str): Dataset root written by the simulate command.
        split (str): train, val or test.
    """
    split_dir = os.path.join(dataset_dir, split)
    manifest = os.path.join(split_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"No rendered '{split}' split at {split_dir}; run the simulate command first")

    examples = []
    for record in read_jsonl(manifest):
        signals = {key: load_audio(os.path.join(split_dir, name)) for key, name in record["files"].items()}
        examples.append(
            MixtureExample(
                y=np.atleast_2d(signals["y"]),
                x=np.atleast_2d(signals["x"]),
                v=np.atleast_2d(signals["v"]),
                s=signals["s"],
                snr_db=record["snr_db"],
                noise_gain=record["noise_gain"],
                talker_pos=SourcePosition(**record["talker"]),
                noise_pos=SourcePosition(**record["noise"]),
                seed=record["seed"],
                meta=record,
            )
        )
    return examples


def crop_example(example, start, num_samples):
    """Crop (and zero-pad at the end if needed) all signals of an example to the same window."""
    stop = start + num_samples

    def cut(signal):
        segment = signal[..., start:stop]
        missing = num_samples - segment.shape[-1]
        if missing > 0:
            pad = [(0, 0)] * (segment.ndim - 1) + [(0, missing)]
            segment = np.pad(segment, pad)
        return segment

    return cut(example.y), cut(example.x), cut(example.v), cut(example.s)


def _stack(crops, ids, dtype):
    y, x, v, s = (torch.as_tensor(np.stack(parts), dtype=dtype) for parts in zip(*crops))
    return Batch(y=y, x=x, v=v, s=s, ids=ids)


def _example_id(example, fallback):
    return example.meta.get("id", str(fallback))


def crop_batch(examples, crop_seconds, batch_size, rng, pad_short=False, sample_rate=SAMPLE_RATE, dtype=torch.float32):
    """
    Draw batch_size distinct examples and take one aligned random crop of each.

    Examples shorter than the crop are skipped with a warning, or zero-padded
    when pad_short is set.

    Args:
        examples (list): MixtureExamples.
        crop_seconds (float): Crop length in seconds.
        batch_size (int): Items per batch (fewer if fewer examples qualify).
        rng (np.random.Generator): Source of the selection and offsets.
        pad_short (bool): Pad short examples instead of skipping them.
    """
    if not examples:
        raise ValueError("crop_batch needs at least one example")
    num_samples = int(round(crop_seconds * sample_rate))

    chosen = []
    for index in rng.permutation(len(examples)):
        example = examples[index]
        if example.num_samples < num_samples and not pad_short:
            logger.warning(
                f"Skipping {_example_id(example, index)}: {example.num_samples} samples, crop needs {num_samples}"
            )
            continue
        chosen.append((int(index), example))
        if len(chosen) == batch_size:
            break
    if not chosen:
        raise ValueError(f"No example is at least {crop_seconds} s long")

    crops, ids = [], []
    for index, example in chosen:
        start = int(rng.integers(0, max(example.num_samples - num_samples, 0) + 1))
        crops.append(crop_example(example, start, num_samples))
        ids.append(_example_id(example, index))
    return _stack(crops, ids, dtype)


def iter_batches(examples, crop_seconds, batch_size, rng, pad_short=False, sample_rate=SAMPLE_RATE, dtype=torch.float32):
    """Every example once, in order, each with a random crop; used for validation."""
    num_samples = int(round(crop_seconds * sample_rate))
    usable = []
    for index, example in enumerate(examples):
        if example.num_samples < num_samples and not pad_short:
            logger.warning(f"Skipping {_example_id(example, index)} in validation: shorter than the crop")
            continue
        usable.append((index, example))
    if not usable:
        raise ValueError(f"No validation example is at least {crop_seconds} s long")

    for offset in range(0, len(usable), batch_size):
        crops, ids = [], []
        for index, example in usable[offset : offset + batch_size]:
            start = int(rng.integers(0, max(example.num_samples - num_samples, 0) + 1))
            crops.append(crop_example(example, start, num_samples))
            ids.append(_example_id(example, index))
        yield _stack(crops, ids, dtype)
