import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F

from ftkd.lib.algorithm.stft import StftConfig, stft
from ftkd.lib.errors import ShapeMismatchError

TAP_NAMES = ("mask", "z_lin", "z_f", "z_t")
GRAM_BLOCKS = ("frame", "bin", "full")


@dataclass(frozen=True)
class KDMethod:
    name: str
    label: str
    taps: tuple
    fusion: str


KD_METHODS = {
    "mask": KDMethod("mask", "KD Mask", ("mask",), "direct"),
    "linear": KDMethod("linear", "KD Linear", ("z_lin",), "direct"),
    "flstm": KDMethod("flstm", "KD F-LSTM", ("z_f",), "selfsim"),
    "tlstm": KDMethod("tlstm", "KD T-LSTM", ("z_t",), "selfsim"),
    "multi": KDMethod("multi", "KD Multi", ("z_f", "z_t", "z_lin"), "selfsim"),
}


def resolve_method(method):
    if isinstance(method, KDMethod):
        return method
    if method not in KD_METHODS:
        raise ValueError(f"Unknown KD method {method!r}, choose from {', '.join(KD_METHODS)}")
    return KD_METHODS[method]


def hard_loss(s_hat, s, cfg=StftConfig()):
    """
    L1 distance in the time domain plus L1 distance between STFT magnitudes.

    Both terms are means over their elements.

    Args:
        s_hat (Tensor): Estimate, (..., N).
        s (Tensor): Clean reference, (..., N).
        cfg (StftConfig): Analysis used for the magnitude term.
    """
    if s_hat.shape != s.shape:
        raise ShapeMismatchError(f"estimate {tuple(s_hat.shape)} and reference {tuple(s.shape)} differ")
    time_term = torch.mean(torch.abs(s_hat - s))
    magnitude_term = torch.mean(torch.abs(stft(s_hat, cfg).abs() - stft(s, cfg).abs()))
    return time_term + magnitude_term


def soft_loss_direct(z_t, z_s):
    """Mean absolute difference between teacher and student outputs of identical shape."""
    if z_t.shape != z_s.shape:
        raise ShapeMismatchError(
            f"direct matching needs identical shapes, got teacher {tuple(z_t.shape)} and student {tuple(z_s.shape)}"
        )
    return torch.mean(torch.abs(z_t - z_s))


def tap_blocks(tap, block="frame"):
    """
    Arrange a (batch, L, K, C) tap into (..., rows, C) blocks.

    frame: one K-row block per frame. bin: one L-row block per frequency.
    full: a single K*L-row block per batch item. Taps with fewer than
    four dims are taken as (..., rows, C) already.
    """
    if block not in GRAM_BLOCKS:
        raise ValueError(f"Unknown Gram block {block!r}, choose from {', '.join(GRAM_BLOCKS)}")
    if tap.numel() == 0 or tap.dim() < 2:
        raise ValueError(f"empty or rank-deficient tap of shape {tuple(tap.shape)}")
    if tap.dim() < 4:
        return tap
    if block == "frame":
        return tap
    if block == "bin":
        return tap.transpose(1, 2)
    return tap.reshape(tap.shape[0], -1, tap.shape[-1])


def gram(z, normalize_rows=False):
    """
    G = Z Z^T over the last two dims.

    Args:
        z (Tensor): (..., rows, C).
        normalize_rows (bool): L2-normalize every row first.
    """
    if z.numel() == 0 or z.dim() < 2:
        raise ValueError(f"cannot build a Gram matrix from shape {tuple(z.shape)}")
    if normalize_rows:
        z = F.normalize(z, dim=-1)
    return torch.matmul(z, z.transpose(-1, -2))


def soft_loss_selfsim(z_t, z_s, block="frame", normalize_rows=False):
    """
    Mean absolute difference between the teacher's and the student's Gram matrices.

    Only the row layout has to match; channel counts may differ.
    """
    if z_t.shape[:-1] != z_s.shape[:-1]:
        raise ShapeMismatchError(
            f"self-similarity needs matching rows, got teacher {tuple(z_t.shape)} and student {tuple(z_s.shape)}"
        )
    g_t = gram(tap_blocks(z_t, block), normalize_rows)
    g_s = gram(tap_blocks(z_s, block), normalize_rows)
    return torch.mean(torch.abs(g_t - g_s))


def soft_loss_multi(taps_t, taps_s, block="frame", normalize_rows=False):
    """Unweighted sum of the self-similarity losses of F-LSTM, T-LSTM and linear outputs."""
    return sum(
        soft_loss_selfsim(tap_tensor(taps_t, name), tap_tensor(taps_s, name), block, normalize_rows)
        for name in KD_METHODS["multi"].taps
    )


def tap_tensor(taps, name):
    if name == "mask":
        return torch.view_as_real(taps.mask)
    return getattr(taps, name)


def soft_loss(method, taps_t, taps_s, block="frame", normalize_rows=False):
    """
    Soft loss of a KD method between teacher and student taps.

    Args:
        method (str or KDMethod): One of KD_METHODS.
        taps_t (IntermediateTaps): Teacher outputs.
        taps_s (IntermediateTaps): Student outputs.
        block (str): Gram block policy for self-similarity methods.
        normalize_rows (bool): Row normalization before the Gram product.
    """
    method = resolve_method(method)
    if method.fusion == "direct":
        return sum(soft_loss_direct(tap_tensor(taps_t, name), tap_tensor(taps_s, name)) for name in method.taps)
    if method.name == "multi":
        return soft_loss_multi(taps_t, taps_s, block, normalize_rows)
    return sum(
        soft_loss_selfsim(tap_tensor(taps_t, name), tap_tensor(taps_s, name), block, normalize_rows)
        for name in method.taps
    )


def combined_loss(hard, soft, alpha):
    """alpha * hard + (1 - alpha) * soft."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    for name, value in (("hard", hard), ("soft", soft)):
        finite = bool(torch.isfinite(value).all()) if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise ValueError(f"{name} loss is not finite")
    return alpha * hard + (1.0 - alpha) * soft
