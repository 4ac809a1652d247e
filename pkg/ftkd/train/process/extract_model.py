import datetime
import hashlib
import os
import pickle
from collections import OrderedDict

import torch

from ftkd.lib.algorithm.ftjnf import FTJNF, ModelConfig, count_macs_per_frame
from ftkd.lib.errors import ModelFormatError

FORMAT_VERSION = 1

# Fields that determine the parameter layout; size_label is informative only.
_LAYOUT_FIELDS = ("f_hidden", "t_hidden", "num_mics", "f_bidirectional", "compress_exponent")


def save_model(model, model_path, name=None, epoch=None, stage=None):
    """
    Write a model container: float32 weights named by layer, the ModelConfig and a format version.

    Args:
        model (FTJNF): The network to save.
        model_path (str): Destination .pth file.
        name (str, optional): Model name stored in the container.
        epoch (int, optional): Training epoch of the snapshot.
        stage (str, optional): Training stage of the snapshot.
    """
    os.makedirs(os.path.dirname(os.path.abspath(model_path)), exist_ok=True)

    opt = OrderedDict(
        weight=OrderedDict(
            (key, value.detach().cpu().to(torch.float32).contiguous())
            for key, value in model.state_dict().items()
        )
    )
    opt["config"] = model.cfg.to_dict()
    opt["format_version"] = FORMAT_VERSION
    opt["model_name"] = name
    opt["epoch"] = epoch
    opt["stage"] = stage
    opt["num_parameters"] = model.num_parameters()
    opt["creation_date"] = datetime.datetime.now().isoformat()

    digest = hashlib.sha256()
    for key, value in opt["weight"].items():
        digest.update(key.encode())
        digest.update(value.numpy().tobytes())
    opt["model_hash"] = digest.hexdigest()

    torch.save(opt, model_path)
    return model_path


def _read_container(model_path):
    if not model_path:
        raise FileNotFoundError("Empty model path")
    if not os.path.isfile(model_path):
        raise FileNotFoundError(f"Model file not found: {model_path}")
    try:
        data = torch.load(model_path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, pickle.UnpicklingError, ValueError) as error:
        raise ModelFormatError(f"{model_path}: unreadable model container ({error})") from error
    if not isinstance(data, dict) or "weight" not in data or "config" not in data:
        raise ModelFormatError(f"{model_path}: not an ftkd model container")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{model_path}: unsupported format version {version!r}")
    return data


def load_model(model_path, expected_config=None, device="cpu"):
    """
    Load a model container written by save_model.

    Args:
        model_path (str): Container path.
        expected_config (ModelConfig, optional): Raise ModelFormatError when the stored layout differs.
        device (str): Target device.
    """
    data = _read_container(model_path)
    try:
        cfg = ModelConfig.from_dict(data["config"])
    except (TypeError, ValueError) as error:
        raise ModelFormatError(f"{model_path}: invalid stored config ({error})") from error

    if expected_config is not None:
        mismatched = [
            field
            for field in _LAYOUT_FIELDS
            if getattr(cfg, field) != getattr(expected_config, field)
        ]
        if mismatched:
            details = ", ".join(
                f"{field}={getattr(cfg, field)!r} (expected {getattr(expected_config, field)!r})"
                for field in mismatched
            )
            raise ModelFormatError(f"{model_path}: config mismatch: {details}")

    model = FTJNF(cfg)
    try:
        model.load_state_dict(data["weight"], strict=True)
    except RuntimeError as error:
        raise ModelFormatError(f"{model_path}: weights don't fit the stored config ({error})") from error
    return model.to(device)


def describe_model(model_path):
    """Human-readable summary of a container."""
    data = _read_container(model_path)
    cfg = ModelConfig.from_dict(data["config"])
    size_mb = os.path.getsize(model_path) / 1e6
    return (
        f"Model Name: {data.get('model_name')}\n"
        f"Size Label: {cfg.size_label}\n"
        f"F/T-LSTM: {cfg.f_hidden} / {cfg.t_hidden}"
        f"{' (bidirectional F-LSTM)' if cfg.f_bidirectional else ''}\n"
        f"Parameters: {data.get('num_parameters')}\n"
        f"MACs per frame: {count_macs_per_frame(cfg)}\n"
        f"File Size: {size_mb:.3f} MB\n"
        f"Stage: {data.get('stage')}\n"
        f"Epoch: {data.get('epoch')}\n"
        f"Format Version: {data.get('format_version')}\n"
        f"Creation Date: {data.get('creation_date')}\n"
        f"Hash (ID): {data.get('model_hash')}"
    )
