import os
import re
import unicodedata
import logging

import numpy as np
import soundfile as sf

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

# Purposes a run seed is expanded into. The integer codes are part of the
# reproducibility contract: changing them changes every derived stream.
SEED_PURPOSES = {
    "simulate": 1,
    "init": 2,
    "crop": 3,
    "val": 4,
}


def derive_rng(seed, purpose, *indices):
    """
    Build an independent generator for (seed, purpose, *indices).

    Streams for different indices never overlap, so work can be fanned out
    over any number of workers without changing results.

    Args:
        seed (int): Global run seed.
        purpose (str): One of SEED_PURPOSES.
        *indices (int): Further keys, e.g. split id and example index.
    """
    if purpose not in SEED_PURPOSES:
        raise ValueError(f"Unknown seed purpose: {purpose}")
    entropy = [int(seed), SEED_PURPOSES[purpose], *(int(i) for i in indices)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed, purpose, *indices):
    """Integer seed for libraries that want one (torch.manual_seed)."""
    return int(derive_rng(seed, purpose, *indices).integers(0, 2**31 - 1))


def load_audio(file, sample_rate=SAMPLE_RATE):
    """
    Load a mono or multichannel WAV file as float64, channels first.

    Args:
        file (str): Path to the audio file.
        sample_rate (int): Required sample rate. There is no resampling.
    """
    file = file.strip(" ").strip('"').strip("\n").strip('"').strip(" ")
    if not os.path.isfile(file):
        raise FileNotFoundError(f"File not found: {file}")
    audio, sr = sf.read(file, dtype="float64", always_2d=True)
    if sr != sample_rate:
        raise ValueError(f"{file}: {sr} Hz doesn't match the required {sample_rate} Hz")
    audio = audio.T
    if not np.all(np.isfinite(audio)):
        raise ValueError(f"{file}: non-finite samples")
    return audio[0] if audio.shape[0] == 1 else audio


def save_audio(file, audio, sample_rate=SAMPLE_RATE, subtype="FLOAT"):
    """
    Write a (N,) or (channels, N) signal to a WAV file.

    Args:
        file (str): Output path.
        audio (np.ndarray): Samples, channels first.
        sample_rate (int): Sample rate written to the header.
        subtype (str): "FLOAT" (32-bit float) or "PCM_16".
    """
    audio = np.asarray(audio)
    if subtype not in ("FLOAT", "PCM_16"):
        raise ValueError(f"Unsupported WAV subtype: {subtype}")
    os.makedirs(os.path.dirname(os.path.abspath(file)), exist_ok=True)
    data = audio.T if audio.ndim == 2 else audio
    sf.write(file, data.astype(np.float32), sample_rate, subtype=subtype)


def format_title(title):
    formatted_title = unicodedata.normalize("NFC", title)
    formatted_title = re.sub(r"[^\w\s.-]", "", formatted_title, flags=re.UNICODE)
    formatted_title = re.sub(r"\s+", "_", formatted_title)
    return formatted_title
