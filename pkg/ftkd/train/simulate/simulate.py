import logging
import multiprocessing
import os
import time

import numpy as np
from tqdm import tqdm

from ftkd.lib.utils import SAMPLE_RATE, derive_rng, save_audio
from ftkd.train.simulate.corpus import build_corpus
from ftkd.train.simulate.scene import ArrayGeometry, SceneConfig, make_example
from ftkd.train.utils import append_jsonl, write_json

logger = logging.getLogger(__name__)

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
MANIFEST_NAME = "examples.jsonl"
SIGNALS = ("y", "x", "v", "s")


def example_id(split, index):
    return f"{split}_{index:05d}"


def render_example(corpus, split, index, seed, geom, scene, snr_db=None):
    """
    Simulate example `index` of a split. The result depends only on
    (seed, split, index), never on which worker renders it.
    """
    rng = derive_rng(seed, "simulate", SPLIT_IDS[split], index)
    speech, speech_source = corpus.speech(split, rng, scene.example_seconds)
    noise, noise_source = corpus.noise(split, rng, scene.example_seconds)
    rir = corpus.rir(split, rng)
    noise_rir = corpus.rir(split, rng) if scene.reverberate_noise else None
    if snr_db is None:
        snr_db = float(rng.uniform(*scene.snr_range))

    example = make_example(speech, noise, rir, snr_db, rng, geom, scene, noise_rir=noise_rir, seed=seed)
    example.meta = {
        "id": example_id(split, index),
        "split": split,
        "index": index,
        "speech_source": speech_source,
        "noise_source": noise_source,
        "rir_source": rir.source,
    }
    return example


def write_example(example, split_dir, geom):
    """
    Write the four signals as float WAVs plus a JSON sidecar; return the sidecar record.

    The WAVs hold float32 samples. measured_snr_db is taken from the float64
    mixture and matches snr_db to 1e-9; stored_snr_db is recomputed from the
    float32 signals on disk and typically differs from snr_db by less than 1e-4 dB.
    """
    name = example.meta["id"]
    files = {key: f"{name}_{key}.wav" for key in SIGNALS}
    stored = {key: getattr(example, key).astype(np.float32) for key in SIGNALS}
    for key, filename in files.items():
        save_audio(os.path.join(split_dir, filename), stored[key], SAMPLE_RATE, subtype="FLOAT")
    front_x = stored["x"][geom.front_index].astype(np.float64)
    front_v = stored["v"][geom.front_index].astype(np.float64)

    record = dict(example.meta)
    record.update(
        snr_db=example.snr_db,
        measured_snr_db=float(example.measured_snr_db(geom.front_index)),
        stored_snr_db=float(10.0 * np.log10(np.sum(front_x**2) / np.sum(front_v**2))),
        noise_gain=example.noise_gain,
        talker=example.talker_pos.to_dict(),
        noise=example.noise_pos.to_dict(),
        seed=example.seed,
        num_samples=example.num_samples,
        sample_rate=SAMPLE_RATE,
        files=files,
    )
    write_json(os.path.join(split_dir, f"{name}.json"), record)
    return record


def render_worker(args):
    corpus, split, index, seed, geom, scene, snr_db, split_dir = args
    example = render_example(corpus, split, index, seed, geom, scene, snr_db)
    return write_example(example, split_dir, geom)


def render_split(corpus, split, jobs, out_dir, seed, geom, scene, num_workers=1):
    """
    Render a list of (index, snr_db or None) jobs into out_dir/split.

    Args:
        corpus: ManifestCorpus or SyntheticCorpus.
        split (str): train, val or test.
        jobs (list): (index, snr_db) pairs; None draws the SNR from scene.snr_range.
        out_dir (str): Dataset root.
        seed (int): Run seed.
        geom (ArrayGeometry): Microphone layout.
        scene (SceneConfig): Scene parameters.
        num_workers (int): Worker processes; 1 renders in-process.
    """
    split_dir = os.path.join(out_dir, split)
    os.makedirs(split_dir, exist_ok=True)
    arg_list = [(corpus, split, index, seed, geom, scene, snr_db, split_dir) for index, snr_db in jobs]

    records = []
    with tqdm(total=len(arg_list), desc=f"Simulating {split}", leave=False) as pbar:
        if num_workers > 1:
            with multiprocessing.Pool(processes=num_workers) as pool:
                for record in pool.imap_unordered(render_worker, arg_list):
                    records.append(record)
                    pbar.update(1)
        else:
            for args in arg_list:
                records.append(render_worker(args))
                pbar.update(1)

    records.sort(key=lambda r: r["index"])
    manifest = os.path.join(split_dir, MANIFEST_NAME)
    if os.path.exists(manifest):
        os.remove(manifest)
    for record in records:
        append_jsonl(manifest, record)
    return records


def simulate_dataset(hps, dataset_dir):
    """
    Render train/val splits at random SNRs and the test split at every SNR of eval.snr_grid.

    Returns:
        dict: split name to list of sidecar records.
    """
    start_time = time.time()
    corpus = build_corpus(hps)
    geom = ArrayGeometry.from_hparams(hps.geometry)
    scene = SceneConfig.from_hparams(hps.scene)
    num_workers = max(int(hps.data.num_workers), 1)

    per_snr = int(hps.eval.examples_per_snr)
    split_jobs = {
        "train": [(i, None) for i in range(int(hps.data.num_train))],
        "val": [(i, None) for i in range(int(hps.data.num_val))],
        "test": [
            (bucket * per_snr + i, float(snr))
            for bucket, snr in enumerate(hps.eval.snr_grid)
            for i in range(per_snr)
        ],
    }

    logger.info(f"Simulating dataset into {dataset_dir} with {num_workers} worker(s)...")
    rendered = {}
    for split, jobs in split_jobs.items():
        rendered[split] = render_split(corpus, split, jobs, dataset_dir, hps.seed, geom, scene, num_workers)
        logger.info(f"{split}: {len(rendered[split])} examples")

    logger.info(f"Simulation completed in {time.time() - start_time:.2f} seconds.")
    return rendered
