import json
import os

import numpy as np
import pytest

from ftkd.configs.config import load_run_config
from ftkd.lib.errors import ConfigurationError
from ftkd.lib.utils import SEED_PURPOSES, derive_rng, load_audio, save_audio
from ftkd.train.data_utils import load_split
from ftkd.train.simulate.corpus import (
    ManifestCorpus,
    SyntheticCorpus,
    build_corpus,
    read_manifest,
    synth_noise,
    synth_rir,
    synth_speech,
)
from ftkd.train.simulate.scene import ArrayGeometry, SceneConfig
from ftkd.train.simulate.simulate import MANIFEST_NAME, example_id, render_example, simulate_dataset


def tiny_config(tmp_path, **extra):
    overrides = {
        "synthetic": True,
        "seed": 7,
        "out_dir": str(tmp_path),
        "data.num_train": 3,
        "data.num_val": 2,
        "eval.snr_grid": [0.0, 5.0],
        "eval.examples_per_snr": 1,
        "scene.example_seconds": 0.5,
    }
    overrides.update(extra)
    return load_run_config(overrides=overrides, environ={})


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def test_read_manifest_resolves_relative_paths(tmp_path):
    manifest = tmp_path / "corpus.jsonl"
    write_manifest(manifest, [{"path": "a.wav", "role": "speech", "split": "train"}])
    records = read_manifest(str(manifest))
    assert records == [{"path": os.path.join(str(tmp_path), "a.wav"), "role": "speech", "split": "train"}]


@pytest.mark.parametrize(
    "line",
    [
        "{not json",
        json.dumps({"path": "a.wav", "role": "speech"}),
        json.dumps({"path": "a.wav", "role": "music", "split": "train"}),
        json.dumps({"path": "a.wav", "role": "noise", "split": "dev"}),
    ],
)
def test_read_manifest_rejects_bad_records(tmp_path, line):
    manifest = tmp_path / "bad.jsonl"
    manifest.write_text(line + "\n")
    with pytest.raises(ConfigurationError):
        read_manifest(str(manifest))


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        read_manifest(str(tmp_path / "nope.jsonl"))


def test_missing_rir_role_is_a_configuration_error(tmp_path):
    manifest = tmp_path / "corpus.jsonl"
    write_manifest(
        manifest,
        [
            {"path": "s.wav", "role": "speech", "split": "train"},
            {"path": "n.wav", "role": "noise", "split": "train"},
        ],
    )
    with pytest.raises(ConfigurationError):
        ManifestCorpus.from_manifests([str(manifest)])


def test_manifest_corpus_reads_audio(tmp_path):
    rng = np.random.default_rng(0)
    save_audio(str(tmp_path / "s.wav"), 0.1 * rng.standard_normal(16000))
    save_audio(str(tmp_path / "n.wav"), 0.1 * rng.standard_normal(8000))
    save_audio(str(tmp_path / "r.wav"), np.array([1.0, 0.0, 0.25]))
    manifest = tmp_path / "corpus.jsonl"
    write_manifest(
        manifest,
        [
            {"path": "s.wav", "role": "speech", "split": "train"},
            {"path": "n.wav", "role": "noise", "split": "train"},
            {"path": "r.wav", "role": "rir", "split": "train"},
        ],
    )
    corpus = ManifestCorpus.from_manifests([str(manifest)])
    speech, source = corpus.speech("val", rng, 0.5)
    assert speech.shape == (8000,)
    assert source.endswith("s.wav")
    rir = corpus.rir("train", rng)
    assert rir.taps.shape == (5, 3)


def test_wrong_sample_rate_is_rejected(tmp_path):
    save_audio(str(tmp_path / "s.wav"), np.zeros(100), sample_rate=8000)
    with pytest.raises(ValueError):
        load_audio(str(tmp_path / "s.wav"))


def test_build_corpus_needs_manifests_or_synthetic(tmp_path):
    hps = tiny_config(tmp_path, synthetic=False)
    with pytest.raises(ConfigurationError):
        build_corpus(hps)
    assert isinstance(build_corpus(tiny_config(tmp_path)), SyntheticCorpus)


def test_synthetic_generators():
    rng = np.random.default_rng(1)
    speech = synth_speech(rng, 1.0)
    assert speech.shape == (16000,)
    assert np.max(np.abs(speech)) == pytest.approx(0.5)
    for color in ("white", "pink"):
        assert np.std(synth_noise(rng, 1.0, color=color)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        synth_noise(rng, 1.0, color="brown")
    rir = synth_rir(rng, num_mics=5, seconds=0.1)
    assert rir.shape == (5, 1600)
    assert np.all(rir[:, 0] == 1.0)
    assert np.all(rir[:, 1:40] == 0.0)


def test_simulate_writes_examples_and_sidecars(tmp_path):
    hps = tiny_config(tmp_path)
    dataset_dir = str(tmp_path / "dataset")
    rendered = simulate_dataset(hps, dataset_dir)
    assert [len(rendered[split]) for split in ("train", "val", "test")] == [3, 2, 2]

    for record in rendered["train"] + rendered["val"]:
        assert -5.0 <= record["snr_db"] <= 15.0
        assert abs(record["measured_snr_db"] - record["snr_db"]) <= 1e-9
    assert sorted(r["snr_db"] for r in rendered["test"]) == [0.0, 5.0]

    with open(os.path.join(dataset_dir, "train", "train_00001.json")) as f:
        sidecar = json.load(f)
    assert sidecar["id"] == "train_00001"
    assert sidecar["files"]["y"] == "train_00001_y.wav"

    examples = load_split(dataset_dir, "train")
    assert [e.meta["id"] for e in examples] == ["train_00000", "train_00001", "train_00002"]
    assert examples[0].y.shape == (5, 8000)
    assert examples[0].s.shape == (8000,)


def test_sidecar_snr_of_the_stored_float32_signals(tmp_path):
    dataset_dir = str(tmp_path / "dataset")
    rendered = simulate_dataset(tiny_config(tmp_path), dataset_dir)
    records = {record["id"]: record for record in rendered["train"]}
    front = ArrayGeometry.default().front_index
    for example in load_split(dataset_dir, "train"):
        record = records[example.meta["id"]]
        x, v = example.x[front], example.v[front]
        recomputed = 10.0 * np.log10(np.sum(x**2) / np.sum(v**2))
        assert abs(recomputed - record["stored_snr_db"]) <= 1e-9
        # float32 quantization moves the SNR by far less than the sweep resolution
        assert abs(record["stored_snr_db"] - record["snr_db"]) < 1e-4
        assert np.allclose(example.y, example.x + example.v, rtol=1e-6, atol=1e-5)


def test_simulate_is_repeatable_byte_for_byte(tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    simulate_dataset(tiny_config(tmp_path), first)
    simulate_dataset(tiny_config(tmp_path, **{"data.num_workers": 2}), second)
    for split in ("train", "val", "test"):
        names = sorted(os.listdir(os.path.join(first, split)))
        assert names == sorted(os.listdir(os.path.join(second, split)))
        for name in names:
            with open(os.path.join(first, split, name), "rb") as a, open(os.path.join(second, split, name), "rb") as b:
                assert a.read() == b.read(), name


def test_render_example_depends_only_on_seed_split_and_index(tmp_path):
    corpus = SyntheticCorpus()
    geom = ArrayGeometry.default()
    scene = SceneConfig(example_seconds=0.25)
    a = render_example(corpus, "val", 4, 3, geom, scene)
    b = render_example(corpus, "val", 4, 3, geom, scene)
    c = render_example(corpus, "val", 5, 3, geom, scene)
    assert np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)
    assert a.meta["id"] == example_id("val", 4)
    assert render_example(corpus, "test", 0, 3, geom, scene, snr_db=10.0).snr_db == 10.0


def test_derived_streams_are_independent():
    a = derive_rng(1, "simulate", 0, 1).standard_normal(4)
    b = derive_rng(1, "simulate", 0, 2).standard_normal(4)
    c = derive_rng(1, "crop", 0, 1).standard_normal(4)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(a, derive_rng(1, "simulate", 0, 1).standard_normal(4))
    with pytest.raises(ValueError):
        derive_rng(1, "shuffle")
    with pytest.raises(ValueError):
        derive_rng(1, "eval")
    assert SEED_PURPOSES == {"simulate": 1, "init": 2, "crop": 3, "val": 4}


def test_load_split_requires_rendering(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_split(str(tmp_path), "train")
    assert not os.path.exists(os.path.join(str(tmp_path), "train", MANIFEST_NAME))
