import sys

import numpy as np
import pytest
import torch

from ftkd.eval.metrics import MetricResult, adapter_command, pesq_external, si_sdr, spectral_l1
from ftkd.infer.infer import enhance
from ftkd.lib.algorithm.ftjnf import FTJNF, ModelConfig
from ftkd.lib.errors import DegenerateInputError, PesqAdapterError, ShapeMismatchError


def reference_and_orthogonal(n=16000):
    t = np.arange(n)
    return np.sin(2 * np.pi * 10 * t / n), np.cos(2 * np.pi * 10 * t / n)


def test_si_sdr_values():
    ref, orth = reference_and_orthogonal()
    assert si_sdr(ref, ref) == 60.0
    assert si_sdr(3.0 * ref + 1.0, ref) == 60.0
    assert si_sdr(ref + 0.1 * orth, ref) == pytest.approx(20.0, abs=1e-6)
    assert si_sdr(ref + orth, ref) == pytest.approx(0.0, abs=1e-6)
    assert si_sdr(np.zeros_like(ref), ref) == -60.0
    assert si_sdr(orth, ref, cap=30.0) == -30.0


def test_si_sdr_errors():
    ref, _ = reference_and_orthogonal(100)
    with pytest.raises(DegenerateInputError):
        si_sdr(ref, np.ones(100))
    with pytest.raises(ShapeMismatchError):
        si_sdr(ref[:99], ref)


def test_spectral_l1():
    ref, orth = reference_and_orthogonal(4000)
    assert spectral_l1(ref, ref) == 0.0
    assert spectral_l1(ref + orth, ref) > 0.0
    with pytest.raises(ShapeMismatchError):
        spectral_l1(ref[:-1], ref)


def test_metric_result_statistics():
    result = MetricResult("si_sdr", "E/linear", 0.0)
    for i, value in enumerate([1.0, 3.0, 2.0, 10.0]):
        result.add(f"test_{i:05d}", value)
    assert result.median == 2.5
    assert result.variance == pytest.approx(np.var([1.0, 3.0, 2.0, 10.0]))
    restored = MetricResult.from_record(result.to_record())
    assert restored.values == result.values
    assert restored.example_ids == result.example_ids
    assert MetricResult("si_sdr", "x", 0.0).median is None


def write_adapter(tmp_path, body):
    path = tmp_path / "adapter.py"
    path.write_text(body)
    return str(path)


def test_pesq_adapter_protocol(tmp_path):
    ref, orth = reference_and_orthogonal(1600)
    assert pesq_external(ref, ref, None) is None
    assert adapter_command("tool.py")[0] == sys.executable

    adapter = write_adapter(tmp_path, "import sys\nassert len(sys.argv) == 3\nprint('3.25')\n")
    assert pesq_external(ref + 0.1 * orth, ref, adapter) == 3.25


@pytest.mark.parametrize(
    "body",
    [
        "print('n/a')\n",
        "print('7.0')\n",
        "import sys\nsys.exit(3)\n",
    ],
)
def test_pesq_adapter_failures(tmp_path, body):
    ref, _ = reference_and_orthogonal(1600)
    with pytest.raises(PesqAdapterError):
        pesq_external(ref, ref, write_adapter(tmp_path, body))


def test_missing_adapter(tmp_path):
    ref, _ = reference_and_orthogonal(1600)
    with pytest.raises(PesqAdapterError):
        pesq_external(ref, ref, str(tmp_path / "no-such-tool"))


def identity_model():
    model = FTJNF(ModelConfig.from_preset("I"))
    with torch.no_grad():
        model.linear.weight.zero_()
        model.linear.bias.copy_(torch.tensor([20.0, 0.0]))
    return model


def test_identity_mask_enhancement_returns_the_center_channel():
    y = np.random.default_rng(0).standard_normal((5, 3000))
    out = enhance(identity_model(), y)
    assert out.shape == (3000,)
    assert np.allclose(out, y[4], atol=1e-9)


def test_enhance_leaves_training_mode_alone():
    model = identity_model().train()
    enhance(model, np.random.default_rng(1).standard_normal((5, 1000)))
    assert model.training
