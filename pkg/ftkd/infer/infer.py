import logging

import numpy as np
import torch

from ftkd.lib.algorithm.ftjnf import apply_mask, featurize
from ftkd.lib.algorithm.stft import StftConfig, istft, stft

logger = logging.getLogger(__name__)


def enhance(model, y, stft_cfg=StftConfig(), center_index=4):
    """
    Enhance one multichannel mixture with a mask model.

    The analysis runs in float64; the network sees its own dtype and the
    mask is applied to the center microphone's spectrogram.

    Args:
        model (nn.Module): Returns IntermediateTaps for (1, L, K, 2M) features.
        y (np.ndarray): (M, N) noisy microphone signals.
        stft_cfg (StftConfig): Analysis/synthesis framing.
        center_index (int): Reference microphone.

    Returns:
        np.ndarray: (N,) enhanced signal.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    num_samples = y.shape[-1]
    y_spec = stft(torch.from_numpy(y), stft_cfg)

    cfg = getattr(model, "cfg", None)
    compress = cfg.compress_exponent if cfg is not None else None
    param = next(model.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    device = param.device if param is not None else torch.device("cpu")

    features = featurize(y_spec, y.shape[0], compress).to(device=device, dtype=dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        taps = model(features.unsqueeze(0))
    model.train(was_training)

    mask = taps.mask[0].to(device="cpu", dtype=y_spec.dtype)
    s_hat = istft(apply_mask(mask, y_spec[center_index]), stft_cfg, length=num_samples)
    return s_hat.numpy()
