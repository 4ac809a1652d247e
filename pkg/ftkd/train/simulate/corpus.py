import json
import logging
import os

import numpy as np

from ftkd.lib.errors import ConfigurationError
from ftkd.lib.utils import SAMPLE_RATE, load_audio
from ftkd.train.simulate.scene import RoomImpulseResponse

logger = logging.getLogger(__name__)

ROLES = ("speech", "noise", "rir")
SPLITS = ("train", "val", "test")


def read_manifest(path):
    """
    Read a line-delimited manifest of {"path", "role", "split"} records.

    Relative paths are resolved against the manifest's directory.
    """
    if not os.path.isfile(path):
        raise ConfigurationError(f"Manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as error:
                raise ConfigurationError(f"{path}:{number}: invalid JSON ({error})") from error
            missing = {"path", "role", "split"} - set(record)
            if missing:
                raise ConfigurationError(f"{path}:{number}: missing {', '.join(sorted(missing))}")
            if record["role"] not in ROLES:
                raise ConfigurationError(f"{path}:{number}: unknown role {record['role']!r}")
            if record["split"] not in SPLITS:
                raise ConfigurationError(f"{path}:{number}: unknown split {record['split']!r}")
            audio_path = record["path"]
            if not os.path.isabs(audio_path):
                audio_path = os.path.join(base, audio_path)
            records.append({"path": audio_path, "role": record["role"], "split": record["split"]})
    return records


class ManifestCorpus:
    """
    Speech, noise and RIR files grouped by role and split.

    Args:
        records (list): Manifest records from read_manifest.
        num_mics (int): Channels an RIR file must have (mono RIRs are replicated).
    """

    def __init__(self, records, num_mics=5):
        self.num_mics = num_mics
        self.files = {(role, split): [] for role in ROLES for split in SPLITS}
        for record in records:
            self.files[(record["role"], record["split"])].append(record["path"])
        for key in self.files:
            self.files[key].sort()

    @classmethod
    def from_manifests(cls, paths, num_mics=5):
        records = []
        for path in paths:
            records.extend(read_manifest(path))
        corpus = cls(records, num_mics=num_mics)
        for role in ROLES:
            if not any(corpus.files[(role, split)] for split in SPLITS):
                raise ConfigurationError(f"No '{role}' entries in the manifests; pass --synthetic or add them")
        return corpus

    def _choose(self, role, split, rng):
        files = self.files[(role, split)] or self.files[(role, "train")]
        if not files:
            raise ConfigurationError(f"No '{role}' files for split '{split}'")
        return files[int(rng.integers(len(files)))]

    def speech(self, split, rng, seconds):
        path = self._choose("speech", split, rng)
        audio = load_audio(path, SAMPLE_RATE)
        if audio.ndim != 1:
            audio = audio[0]
        n = int(round(seconds * SAMPLE_RATE))
        if audio.shape[0] > n:
            offset = int(rng.integers(0, audio.shape[0] - n + 1))
            audio = audio[offset : offset + n]
        elif audio.shape[0] < n:
            logger.warning(f"{path} is shorter than {seconds} s; the example will be short")
        return audio, path

    def noise(self, split, rng, seconds):
        path = self._choose("noise", split, rng)
        audio = load_audio(path, SAMPLE_RATE)
        if audio.ndim != 1:
            audio = audio[0]
        return audio, path

    def rir(self, split, rng):
        path = self._choose("rir", split, rng)
        taps = np.atleast_2d(load_audio(path, SAMPLE_RATE))
        if taps.shape[0] == 1:
            taps = np.repeat(taps, self.num_mics, axis=0)
        if taps.shape[0] != self.num_mics:
            raise ConfigurationError(f"{path}: RIR has {taps.shape[0]} channels, the array has {self.num_mics}")
        return RoomImpulseResponse(taps=taps, sample_rate=SAMPLE_RATE, source=path)


def synth_speech(rng, seconds, sample_rate=SAMPLE_RATE, harmonics=12):
    """
    Speech-like test signal: a harmonic complex with a gliding fundamental
    and a syllable-rate amplitude envelope.
    """
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f_start, f_end = rng.uniform(90.0, 250.0, size=2)
    f0 = f_start + (f_end - f_start) * t / max(seconds, 1e-9)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    signal = np.zeros(n)
    for h in range(1, harmonics + 1):
        if h * max(f_start, f_end) >= sample_rate / 2:
            break
        signal += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    rate = rng.uniform(3.0, 5.0)
    envelope = 0.5 * (1 - np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    signal *= envelope ** 2
    peak = np.max(np.abs(signal))
    return 0.5 * signal / peak if peak > 0 else signal


def synth_noise(rng, seconds, sample_rate=SAMPLE_RATE, color="white"):
    """White or pink (1/f power) Gaussian noise with unit variance."""
    n = int(round(seconds * sample_rate))
    white = rng.standard_normal(n)
    if color == "white":
        noise = white
    elif color == "pink":
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        shaping = np.ones_like(freqs)
        shaping[1:] = 1.0 / np.sqrt(freqs[1:] / freqs[1])
        noise = np.fft.irfft(spectrum * shaping, n=n)
    else:
        raise ValueError(f"Unknown noise color: {color}")
    return noise / np.std(noise)


def synth_rir(rng, num_mics=5, seconds=0.25, t60=0.3, sample_rate=SAMPLE_RATE, density=0.05):
    """
    Sparse exponentially decaying multichannel RIR with a unit direct-path tap.

    Reflections start 2.5 ms after the direct path, appear with the given
    probability per sample and decay by 60 dB after t60 seconds.
    """
    length = max(int(round(seconds * sample_rate)), 1)
    taps = np.zeros((num_mics, length))
    taps[:, 0] = 1.0
    onset = int(0.0025 * sample_rate)
    if length > onset:
        t = np.arange(onset, length) / sample_rate
        decay = np.exp(-3.0 * np.log(10.0) * t / t60)
        for m in range(num_mics):
            hits = rng.random(t.shape[0]) < density
            amplitude = 0.5 * rng.choice([-1.0, 1.0], size=t.shape[0]) * rng.random(t.shape[0])
            taps[m, onset:] = hits * amplitude * decay
    return taps


class SyntheticCorpus:
    """
    Corpus-free stand-in generating every signal from the caller's rng.

    Noise alternates between white and pink at random.
    """

    def __init__(self, num_mics=5, rir_seconds=0.25, t60=0.3):
        self.num_mics = num_mics
        self.rir_seconds = rir_seconds
        self.t60 = t60

    def speech(self, split, rng, seconds):
        return synth_speech(rng, seconds), "synthetic:speech"

    def noise(self, split, rng, seconds):
        color = "pink" if rng.random() < 0.5 else "white"
        return synth_noise(rng, seconds, color=color), f"synthetic:{color}"

    def rir(self, split, rng):
        taps = synth_rir(rng, self.num_mics, self.rir_seconds, self.t60)
        return RoomImpulseResponse(taps=taps, sample_rate=SAMPLE_RATE, source="synthetic:rir")


def build_corpus(hps):
    """Corpus selected by the run config: synthetic or manifest-driven."""
    num_mics = int(hps.model.num_mics)
    if hps.synthetic:
        return SyntheticCorpus(
            num_mics=num_mics,
            rir_seconds=float(hps.scene.synthetic_rir_seconds),
            t60=float(hps.scene.synthetic_t60),
        )
    if not hps.data.manifests:
        raise ConfigurationError("No manifests configured (data.manifests); pass --synthetic for generated data")
    return ManifestCorpus.from_manifests(hps.data.manifests, num_mics=num_mics)
