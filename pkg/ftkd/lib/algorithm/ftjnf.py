import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
from torch import nn

from ftkd.lib.errors import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

# F-LSTM / T-LSTM hidden units per size label.
PRESETS = {
    "A": (512, 256),
    "B": (256, 64),
    "C": (128, 32),
    "D": (88, 40),
    "E": (80, 32),
    "F": (72, 24),
    "G": (64, 16),
    "H": (56, 8),
    "I": (48, 8),
}

# Published reference values per size: parameters, GMACs per frame, file size in MB.
REFERENCE_SIZES = {
    "A": (1400.0e3, 34.7, 9.64),
    "B": (364.9e3, 8.9, 3.49),
    "C": (92.7e3, 2.3, 1.44),
    "D": (56.4e3, 1.4, 1.1),
    "E": (44.4e3, 1.1, 0.95),
    "F": (33.9e3, 0.85, 0.65),
    "G": (24.9e3, 0.63, 0.64),
    "H": (17.4e3, 0.44, 0.55),
    "I": (13.4e3, 0.34, 0.48),
}


@dataclass(frozen=True)
class ModelConfig:
    f_hidden: int
    t_hidden: int
    num_mics: int = 5
    f_bidirectional: bool = False
    size_label: Optional[str] = None
    compress_exponent: Optional[float] = None

    def __post_init__(self):
        for name in ("f_hidden", "t_hidden", "num_mics"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.f_bidirectional and self.f_hidden % 2:
            raise ValueError("a bidirectional F-LSTM needs an even f_hidden")
        if self.size_label is not None and self.size_label not in PRESETS:
            raise ValueError(f"Unknown size label: {self.size_label}")
        if self.compress_exponent is not None and not 0 < self.compress_exponent <= 1:
            raise ValueError("compress_exponent must be in (0, 1]")

    @property
    def input_width(self):
        return 2 * self.num_mics

    @classmethod
    def from_preset(cls, label, **kwargs):
        if label not in PRESETS:
            raise ValueError(f"Unknown preset {label!r}, choose from {', '.join(PRESETS)}")
        f_hidden, t_hidden = PRESETS[label]
        return cls(f_hidden=f_hidden, t_hidden=t_hidden, size_label=label, **kwargs)

    @classmethod
    def from_hparams(cls, hps):
        extra = dict(
            num_mics=int(hps.num_mics),
            f_bidirectional=bool(hps.f_bidirectional),
            compress_exponent=hps.compress_exponent,
        )
        if hps.preset:
            return cls.from_preset(hps.preset, **extra)
        return cls(f_hidden=int(hps.f_hidden), t_hidden=int(hps.t_hidden), **extra)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def _lstm_params(input_size, hidden, bidirectional=False):
    if bidirectional:
        half = hidden // 2
        return 2 * 4 * half * (input_size + half + 2)
    return 4 * hidden * (input_size + hidden + 2)


def count_params(cfg):
    """
    Closed-form trainable parameter count.

    Each LSTM direction holds 4 gates with input and recurrent weights and
    two bias vectors; the bidirectional F-LSTM uses f_hidden / 2 units per
    direction.
    """
    return (
        _lstm_params(cfg.input_width, cfg.f_hidden, cfg.f_bidirectional)
        + _lstm_params(cfg.f_hidden, cfg.t_hidden)
        + cfg.t_hidden * 2
        + 2
    )


def count_macs_per_frame(cfg, num_bins=257):
    """
    Multiply-accumulates to process one STFT frame.

    One F-LSTM step and one T-LSTM step per frequency bin, counting only the
    gate matrix products and the output layer.

    Args:
        cfg (ModelConfig): Network sizes.
        num_bins (int): Number of frequency bins K.
    """
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    i = cfg.input_width
    if cfg.f_bidirectional:
        half = cfg.f_hidden // 2
        f_cost = 2 * 4 * half * (i + half)
    else:
        f_cost = 4 * cfg.f_hidden * (i + cfg.f_hidden)
    t_cost = 4 * cfg.t_hidden * (cfg.f_hidden + cfg.t_hidden)
    return num_bins * (f_cost + t_cost + 2 * cfg.t_hidden)


def nominal_size_mb(cfg):
    """Size of the float32 parameter payload in MB (10^6 bytes)."""
    return count_params(cfg) * 4 / 1e6


@dataclass
class IntermediateTaps:
    """
    Outputs of one forward pass, all laid out as (batch, L, K, C).

    z_f, z_t are the F-LSTM and T-LSTM outputs, z_lin the linear layer
    output before tanh, mask the complex mask of shape (batch, K, L).
    """

    z_f: torch.Tensor
    z_t: torch.Tensor
    z_lin: torch.Tensor
    mask: torch.Tensor


def featurize(y, num_mics=5, compress_exponent=None):
    """
    Stack real and imaginary parts of all microphones.

    Args:
        y (Tensor): Complex spectrograms (batch, M, K, L) or (M, K, L).
        num_mics (int): Expected M.
        compress_exponent (float, optional): Power-law magnitude compression.

    Returns:
        Real tensor (batch, L, K, 2M) ordered [Re mic0, Im mic0, ..., Re mic4, Im mic4].
    """
    if not torch.is_complex(y):
        raise ValueError("featurize expects complex spectrograms")
    squeeze = y.dim() == 3
    if squeeze:
        y = y.unsqueeze(0)
    if y.dim() != 4 or y.shape[1] != num_mics:
        raise ShapeMismatchError(f"expected (batch, {num_mics}, K, L) spectrograms, got {tuple(y.shape)}")
    if compress_exponent is not None:
        magnitude = y.abs()
        y = torch.polar(magnitude.pow(compress_exponent), y.angle())
    b, m, k, l = y.shape
    features = torch.view_as_real(y).permute(0, 3, 2, 1, 4).reshape(b, l, k, 2 * m)
    return features[0] if squeeze else features


def defeaturize(features, num_mics=5):
    """Inverse of featurize (without compression)."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    b, l, k, c = features.shape
    if c != 2 * num_mics:
        raise ShapeMismatchError(f"expected {2 * num_mics} feature channels, got {c}")
    pairs = features.reshape(b, l, k, num_mics, 2).permute(0, 3, 2, 1, 4).contiguous()
    y = torch.view_as_complex(pairs)
    return y[0] if squeeze else y


def apply_mask(mask, y_ref):
    """Complex multiplication of the mask with the reference microphone spectrogram."""
    if mask.shape != y_ref.shape:
        raise ShapeMismatchError(f"mask {tuple(mask.shape)} doesn't match reference {tuple(y_ref.shape)}")
    return mask * y_ref


class FTJNF(nn.Module):
    """
    Frequency-time joint non-linear filter.

    An LSTM runs over frequency within each frame, a causal LSTM over time
    within each frequency bin, and a linear layer with tanh maps every
    time-frequency bin to the real and imaginary part of a complex mask.

    Args:
        cfg (ModelConfig): Network sizes.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        f_units = cfg.f_hidden // 2 if cfg.f_bidirectional else cfg.f_hidden
        self.f_lstm = nn.LSTM(
            cfg.input_width, f_units, batch_first=True, bidirectional=cfg.f_bidirectional
        )
        self.t_lstm = nn.LSTM(cfg.f_hidden, cfg.t_hidden, batch_first=True)
        self.linear = nn.Linear(cfg.t_hidden, 2)
        self.reset_parameters()

    def reset_parameters(self):
        # Weights keep the uniform(+-1/sqrt(h)) LSTM default; gate order is i, f, g, o.
        for lstm in (self.f_lstm, self.t_lstm):
            hidden = lstm.hidden_size
            for name, param in lstm.named_parameters():
                if name.startswith("bias"):
                    with torch.no_grad():
                        param.zero_()
                        if name.startswith("bias_ih"):
                            param[hidden : 2 * hidden] = 1.0

    @staticmethod
    def _check_finite(name, tensor):
        if not torch.isfinite(tensor).all():
            bad = (~torch.isfinite(tensor)).sum().item()
            raise NonFiniteError(
                f"{name} produced {bad} non-finite values of {tensor.numel()} (shape {tuple(tensor.shape)})"
            )

    def forward(self, features):
        """
        Args:
            features (Tensor): (batch, L, K, 2M) from featurize.

        Returns:
            IntermediateTaps
        """
        if features.dim() != 4 or features.shape[-1] != self.cfg.input_width:
            raise ShapeMismatchError(
                f"expected (batch, L, K, {self.cfg.input_width}) features, got {tuple(features.shape)}"
            )
        self._check_finite("input", features)
        b, l, k, c = features.shape

        z_f, _ = self.f_lstm(features.reshape(b * l, k, c))
        z_f = z_f.reshape(b, l, k, -1)
        self._check_finite("F-LSTM", z_f)

        t_in = z_f.permute(0, 2, 1, 3).reshape(b * k, l, -1)
        z_t, _ = self.t_lstm(t_in)
        z_t = z_t.reshape(b, k, l, -1).permute(0, 2, 1, 3)
        self._check_finite("T-LSTM", z_t)

        z_lin = self.linear(z_t)
        self._check_finite("linear", z_lin)

        out = torch.tanh(z_lin)
        mask = torch.complex(out[..., 0], out[..., 1]).transpose(1, 2)
        return IntermediateTaps(z_f=z_f, z_t=z_t, z_lin=z_lin, mask=mask)

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
