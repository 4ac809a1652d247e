"""
STFT analysis/synthesis with a square-root Hann window at 50% overlap.

Framing: the signal is zero-padded by one frame shift on the left and by
one frame shift plus whatever completes the last hop on the right. Every
input sample is then covered by exactly two frames, and since the squared
window sums to one at this shift, overlap-add reconstructs the input
exactly (up to rounding) without any division by a window envelope.

Forward FFT is unnormalized, inverse is 1/N (torch.fft conventions).
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ftkd.lib.errors import ShapeMismatchError
from ftkd.lib.utils import SAMPLE_RATE


def build_sqrt_hann(frame_length, dtype=torch.float64):
    """
    Square root of the periodic Hann window.

    Args:
        frame_length (int): Even window length, at least 2.
        dtype (torch.dtype): Output dtype.
    """
    if not isinstance(frame_length, int) or frame_length < 2 or frame_length % 2:
        raise ValueError(f"frame_length must be an even integer >= 2, got {frame_length!r}")
    hann = torch.hann_window(frame_length, periodic=True, dtype=torch.float64)
    # hann[0] is exactly 0, clamp guards the -0.0/denormal edge of sqrt
    return torch.sqrt(hann.clamp_min(0.0)).to(dtype)


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 512
    frame_shift: int = 256
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frame_length < 2 or self.frame_length % 2:
            raise ValueError(f"frame_length must be even and >= 2, got {self.frame_length}")
        if self.frame_shift * 2 != self.frame_length:
            raise ValueError(
                f"frame_shift must be half the frame length (50% overlap), got {self.frame_shift}/{self.frame_length}"
            )
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")

    @property
    def num_bins(self):
        return self.frame_length // 2 + 1

    def window(self, dtype=torch.float64, device=None):
        return build_sqrt_hann(self.frame_length, dtype=dtype).to(device)

    def num_frames(self, num_samples):
        """L for an input of num_samples under the padding policy."""
        hops = -(-num_samples // self.frame_shift)
        return hops + 1

    @classmethod
    def from_hparams(cls, hps):
        return cls(
            frame_length=int(hps.frame_length),
            frame_shift=int(hps.frame_shift),
            sample_rate=int(hps.sample_rate),
        )


def _as_tensor(x):
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.float64)
    return x


def stft(x, cfg=StftConfig()):
    """
    One-sided STFT of a real signal.

    Args:
        x (Tensor or np.ndarray): Real signal of shape (..., N).
        cfg (StftConfig): Framing parameters.

    Returns:
        Complex tensor of shape (..., K, L), K = frame_length // 2 + 1.
    """
    x = _as_tensor(x)
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ValueError("stft of an empty signal")
    if not torch.isfinite(x).all():
        raise ValueError("stft input contains NaN or Inf")

    hop = cfg.frame_shift
    n = x.shape[-1]
    extra = (-n) % hop
    batch_shape = x.shape[:-1]
    padded = F.pad(x.reshape(-1, n), (hop, hop + extra))

    spec = torch.stft(
        padded,
        n_fft=cfg.frame_length,
        hop_length=hop,
        win_length=cfg.frame_length,
        window=cfg.window(dtype=x.dtype, device=x.device),
        center=False,
        normalized=False,
        onesided=True,
        return_complex=True,
    )
    return spec.reshape(*batch_shape, spec.shape[-2], spec.shape[-1])


def istft(spec, cfg=StftConfig(), length=None):
    """
    Overlap-add synthesis with the square-root Hann synthesis window.

    Args:
        spec (Tensor): Complex tensor of shape (..., K, L).
        cfg (StftConfig): Framing parameters used for the analysis.
        length (int, optional): Number of output samples. Defaults to (L - 1) * frame_shift.
    """
    spec = torch.as_tensor(spec)
    if spec.dim() < 2 or spec.shape[-2] != cfg.num_bins:
        raise ShapeMismatchError(
            f"expected (..., {cfg.num_bins}, L) coefficients, got {tuple(spec.shape)}"
        )
    if not spec.is_complex():
        raise ValueError("istft expects complex coefficients")

    hop = cfg.frame_shift
    num_frames = spec.shape[-1]
    max_length = (num_frames - 1) * hop
    if length is None:
        length = max_length
    if length > max_length or length < 0:
        raise ShapeMismatchError(f"length {length} incompatible with {num_frames} frames")

    batch_shape = spec.shape[:-2]
    frames = torch.fft.irfft(spec.reshape(-1, cfg.num_bins, num_frames), n=cfg.frame_length, dim=-2)
    window = cfg.window(dtype=frames.dtype, device=frames.device)
    frames = frames * window[:, None]

    total = (num_frames + 1) * hop
    signal = F.fold(
        frames,
        output_size=(1, total),
        kernel_size=(1, cfg.frame_length),
        stride=(1, hop),
    )
    signal = signal.reshape(-1, total)[:, hop : hop + length]
    return signal.reshape(*batch_shape, length)
