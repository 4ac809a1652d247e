"""
Free-field multichannel scene synthesis.

Positions are relative to the array's center microphone: azimuth is measured
in the horizontal plane from +x (front) towards +y, elevation from the
horizontal plane towards +z.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve

from ftkd.lib.errors import DegenerateInputError, ShapeMismatchError
from ftkd.lib.utils import SAMPLE_RATE

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
MAX_APERTURE = 0.2

TALKER_AZIMUTHS = tuple(range(-30, 31, 5))
TALKER_ELEVATIONS = tuple(range(-10, 11, 5))
NOISE_AZIMUTHS = tuple(range(0, 360, 45))


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: tuple
    front_index: int = 0
    center_index: int = 4
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        positions = np.asarray(self.mic_positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError("mic_positions must be a list of 3D coordinates")
        if positions.shape[0] != 5:
            raise ValueError(f"the array must have 5 microphones, got {positions.shape[0]}")
        for name in ("front_index", "center_index"):
            index = getattr(self, name)
            if index is None or not 0 <= index < positions.shape[0]:
                raise ValueError(f"{name} must be within [0, {positions.shape[0] - 1}], got {index}")
        for a, b in combinations(range(positions.shape[0]), 2):
            distance = np.linalg.norm(positions[a] - positions[b])
            if distance > MAX_APERTURE + 1e-12:
                raise ValueError(f"mics {a} and {b} are {distance:.3f} m apart, more than {MAX_APERTURE} m")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        object.__setattr__(self, "mic_positions", tuple(tuple(float(c) for c in p) for p in positions))

    @classmethod
    def default(cls, radius=0.05, **kwargs):
        """Four mics on a horizontal circle (the first at +x) plus one at the center."""
        angles = np.deg2rad([0.0, 90.0, 180.0, 270.0])
        circle = [(radius * math.cos(a), radius * math.sin(a), 0.0) for a in angles]
        return cls(mic_positions=tuple(circle) + ((0.0, 0.0, 0.0),), **kwargs)

    @classmethod
    def from_hparams(cls, hps):
        kwargs = dict(
            front_index=int(hps.front_index),
            center_index=int(hps.center_index),
            speed_of_sound=float(hps.speed_of_sound),
        )
        if hps.mic_positions:
            return cls(mic_positions=tuple(tuple(p) for p in hps.mic_positions), **kwargs)
        return cls.default(radius=float(hps.radius), **kwargs)

    @property
    def positions(self):
        return np.asarray(self.mic_positions, dtype=np.float64)

    @property
    def num_mics(self):
        return len(self.mic_positions)

    @property
    def center(self):
        return self.positions[self.center_index]


@dataclass(frozen=True)
class SourcePosition:
    azimuth: float
    elevation: float
    distance: float

    def cartesian(self, origin=(0.0, 0.0, 0.0)):
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        offset = self.distance * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        return np.asarray(origin, dtype=np.float64) + offset

    def to_dict(self):
        return {"azimuth": self.azimuth, "elevation": self.elevation, "distance": self.distance}


@dataclass(frozen=True)
class SceneConfig:
    talker_distance: float = 5.0
    noise_distance: float = 5.0
    snr_range: tuple = (-5.0, 15.0)
    example_seconds: float = 6.0
    free_field_attenuation: bool = True
    reverberate_noise: bool = False
    fd_taps: int = 65
    kaiser_beta: float = 8.0
    synthetic_rir_seconds: float = 0.25
    synthetic_t60: float = 0.3

    def __post_init__(self):
        if self.talker_distance <= 0 or self.noise_distance <= 0:
            raise ValueError("source distances must be positive")
        low, high = self.snr_range
        if low > high:
            raise ValueError(f"snr_range must be ascending, got {self.snr_range}")
        if self.example_seconds <= 0:
            raise ValueError("example_seconds must be positive")
        if self.fd_taps < 3 or self.fd_taps % 2 == 0:
            raise ValueError("fd_taps must be an odd number >= 3")
        if self.synthetic_rir_seconds <= 0 or self.synthetic_t60 <= 0:
            raise ValueError("synthetic RIR length and T60 must be positive")

    @classmethod
    def from_hparams(cls, hps):
        return cls(
            talker_distance=float(hps.talker_distance),
            noise_distance=float(hps.noise_distance),
            snr_range=tuple(float(v) for v in hps.snr_range),
            example_seconds=float(hps.example_seconds),
            free_field_attenuation=bool(hps.free_field_attenuation),
            reverberate_noise=bool(hps.reverberate_noise),
            fd_taps=int(hps.fd_taps),
            kaiser_beta=float(hps.kaiser_beta),
            synthetic_rir_seconds=float(hps.synthetic_rir_seconds),
            synthetic_t60=float(hps.synthetic_t60),
        )


@dataclass(frozen=True)
class RoomImpulseResponse:
    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source: str = "identity"

    def __post_init__(self):
        taps = np.atleast_2d(np.asarray(self.taps, dtype=np.float64))
        if taps.shape[-1] == 0:
            raise ValueError("RIR has no taps")
        if not np.all(np.isfinite(taps)):
            raise ValueError("RIR contains non-finite taps")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def identity(cls, num_mics=5):
        return cls(taps=np.ones((num_mics, 1)), source="identity")

    @property
    def num_channels(self):
        return self.taps.shape[0]


@dataclass
class MixtureExample:
    """
    One simulated scene. y, x, v are (M, N), s is (N,).

    y == x + v, where v is the noise image after SNR scaling.
    """

    y: np.ndarray
    x: np.ndarray
    v: np.ndarray
    snr_db: float
    noise_gain: float
    s: Optional[np.ndarray] = None
    talker_pos: Optional[SourcePosition] = None
    noise_pos: Optional[SourcePosition] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def num_samples(self):
        return self.y.shape[-1]

    def measured_snr_db(self, front_index):
        return 10.0 * np.log10(np.sum(self.x[front_index] ** 2) / np.sum(self.v[front_index] ** 2))


def talker_grid(distance=5.0):
    return [
        SourcePosition(float(az), float(el), float(distance))
        for az in TALKER_AZIMUTHS
        for el in TALKER_ELEVATIONS
    ]


def noise_grid(distance=5.0):
    return [SourcePosition(float(az), 0.0, float(distance)) for az in NOISE_AZIMUTHS]


def sample_talker_position(rng, distance=5.0):
    grid = talker_grid(distance)
    return grid[int(rng.integers(len(grid)))]


def sample_noise_position(rng, distance=5.0):
    grid = noise_grid(distance)
    return grid[int(rng.integers(len(grid)))]


def fractional_delay(signal, delay, taps=65, beta=8.0):
    """
    Delay a signal by a non-integer number of samples with a Kaiser-windowed sinc.

    The output keeps the input length; samples shifted past the end are dropped.

    Args:
        signal (np.ndarray): (N,) input.
        delay (float): Delay in samples, >= 0.
        taps (int): Odd filter length.
        beta (float): Kaiser window shape.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if delay < 0:
        raise ValueError(f"delay must be non-negative, got {delay}")
    n = signal.shape[-1]
    whole = int(math.floor(delay))
    frac = delay - whole
    half = taps // 2
    k = np.arange(taps) - half
    kernel = np.sinc(k - frac) * np.kaiser(taps, beta)
    full = np.convolve(signal, kernel)

    # out[i] = full[i + half - whole]
    out = np.zeros(n)
    start = max(0, whole - half)
    stop = min(n, full.shape[0] + whole - half)
    if start < stop:
        out[start:stop] = full[start + half - whole : stop + half - whole]
    return out


def propagation_distances(pos, geom):
    source = pos.cartesian(origin=geom.center)
    distances = np.linalg.norm(geom.positions - source[None, :], axis=-1)
    if np.any(distances < 1e-6):
        raise ValueError(f"source at {pos} coincides with a microphone")
    return distances


def propagate_free_field(s, pos, geom, sample_rate=SAMPLE_RATE, reference_distance=1.0, taps=65, beta=8.0):
    """
    Free-field image of a point source at every microphone.

    Channel m is s delayed by d_m / c and scaled by reference_distance / d_m.

    Args:
        s (np.ndarray): (N,) source signal.
        pos (SourcePosition): Source position relative to the center microphone.
        geom (ArrayGeometry): Microphone layout.
        reference_distance (float, optional): Distance with unit gain; None disables attenuation.
    """
    distances = propagation_distances(pos, geom)
    delays = distances / geom.speed_of_sound * sample_rate
    out = np.stack([fractional_delay(s, d, taps=taps, beta=beta) for d in delays])
    if reference_distance is not None:
        out *= (reference_distance / distances)[:, None]
    return out


def apply_rir(x, rir):
    """
    Convolve every channel with its impulse response, truncated to the input length.

    A single-channel RIR is applied to all channels.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    taps = rir.taps
    if taps.shape[0] == 1 and x.shape[0] > 1:
        taps = np.repeat(taps, x.shape[0], axis=0)
    if taps.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"RIR has {taps.shape[0]} channels, signal has {x.shape[0]}")
    if rir.sample_rate != SAMPLE_RATE:
        raise ValueError(f"RIR sample rate {rir.sample_rate} Hz doesn't match {SAMPLE_RATE} Hz")
    return fftconvolve(x, taps, mode="full", axes=-1)[:, : x.shape[-1]]


def noise_gain(x_front, v_front, snr_db, allow_infinite=False):
    """Scale that puts the noise at snr_db relative to the speech."""
    energy_x = float(np.sum(np.square(x_front)))
    energy_v = float(np.sum(np.square(v_front)))
    if energy_x <= 0.0:
        raise DegenerateInputError("speech has zero energy at the front microphone")
    if energy_v <= 0.0:
        raise DegenerateInputError("noise has zero energy at the front microphone")
    if math.isnan(snr_db):
        raise ValueError("snr_db is NaN")
    if math.isinf(snr_db):
        if snr_db > 0 and allow_infinite:
            return 0.0
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    return math.sqrt(energy_x / (energy_v * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(x, v, snr_db, geom, allow_infinite=False):
    """
    Add noise to speech so the front microphone sees exactly snr_db.

    Args:
        x (np.ndarray): (M, N) speech image.
        v (np.ndarray): (M, N) unscaled noise image.
        snr_db (float): Target SNR in dB.
        geom (ArrayGeometry): Provides the front microphone.
        allow_infinite (bool): Accept snr_db=+inf and return noise-free mixtures.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise ShapeMismatchError(f"speech {x.shape} and noise {v.shape} differ in shape")
    if x.shape[0] != geom.num_mics:
        raise ShapeMismatchError(f"expected {geom.num_mics} channels, got {x.shape[0]}")
    gain = noise_gain(x[geom.front_index], v[geom.front_index], snr_db, allow_infinite)
    v_scaled = gain * v
    return MixtureExample(y=x + v_scaled, x=x, v=v_scaled, snr_db=float(snr_db), noise_gain=gain)


def fit_noise(noise, num_samples, rng):
    """Tile noise to cover num_samples, then cut a random segment."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] == 0:
        raise DegenerateInputError("empty noise signal")
    if noise.shape[-1] < num_samples:
        repeats = -(-num_samples // noise.shape[-1]) + 1
        noise = np.tile(noise, repeats)
    offset = int(rng.integers(0, noise.shape[-1] - num_samples + 1))
    return noise[offset : offset + num_samples]


def make_example(
    speech,
    noise,
    rir,
    snr_db,
    rng,
    geom,
    scene=SceneConfig(),
    noise_rir=None,
    seed=None,
    allow_infinite_snr=False,
):
    """
    Render one scene: sample positions, propagate and reverberate the talker,
    propagate the noise and mix at the requested SNR.

    The target s is the dry speech delayed to its direct-path arrival at the
    center microphone.
    """
    speech = np.asarray(speech, dtype=np.float64)
    if speech.ndim != 1 or speech.shape[0] == 0:
        raise ValueError("speech must be a non-empty mono signal")
    num_samples = speech.shape[0]

    talker_pos = sample_talker_position(rng, scene.talker_distance)
    noise_pos = sample_noise_position(rng, scene.noise_distance)
    noise_segment = fit_noise(noise, num_samples, rng)

    fd = dict(taps=scene.fd_taps, beta=scene.kaiser_beta)
    talker_ref = talker_pos.distance if scene.free_field_attenuation else None
    noise_ref = noise_pos.distance if scene.free_field_attenuation else None

    x = apply_rir(propagate_free_field(speech, talker_pos, geom, reference_distance=talker_ref, **fd), rir)
    v = propagate_free_field(noise_segment, noise_pos, geom, reference_distance=noise_ref, **fd)
    if scene.reverberate_noise:
        v = apply_rir(v, noise_rir if noise_rir is not None else rir)

    center_delay = propagation_distances(talker_pos, geom)[geom.center_index] / geom.speed_of_sound * SAMPLE_RATE
    s = fractional_delay(speech, center_delay, **fd)

    example = mix_at_snr(x, v, snr_db, geom, allow_infinite=allow_infinite_snr)
    return replace(example, s=s, talker_pos=talker_pos, noise_pos=noise_pos, seed=seed)
