import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ftkd.train.utils import read_jsonl  # noqa: E402

logger = logging.getLogger(__name__)

SNR_RECORDS = "records_snr.jsonl"
SIZE_RECORDS = "records_size.jsonl"
SUMMARY = "summary.txt"
SNR_PLOT = "snr_sweep.svg"
SIZE_PLOT = "size_sweep.svg"


def _fmt(value, digits=3):
    return "-" if value is None else f"{value:.{digits}f}"


def snr_table(records, metric="si_sdr"):
    models = list(dict.fromkeys(r["model"] for r in records if r["metric"] == metric))
    snrs = sorted({r["snr_db"] for r in records if r["metric"] == metric})
    cells = {(r["model"], r["snr_db"]): r for r in records if r["metric"] == metric}
    lines = [f"{metric}: median (population variance) per SNR", "model".ljust(16) + "".join(f"{s:>+8.1f} dB".rjust(22) for s in snrs)]
    for model in models:
        row = model.ljust(16)
        for snr in snrs:
            cell = cells.get((model, snr))
            text = "-" if cell is None else f"{_fmt(cell['median'])} ({_fmt(cell['variance'])})"
            row += text.rjust(22)
        lines.append(row)
    return lines


def size_table(rows, metric="si_sdr"):
    lines = [
        f"{metric} at {rows[0]['snr_db'] if rows else 0.0} dB vs model size",
        f"{'size':<6}{'method':<10}{'params':>10}{'MACs/frame':>14}{'MB':>8}{'median':>10}{'variance':>10}",
    ]
    for row in rows:
        if row["absent"]:
            median = variance = "absent"
        else:
            median = _fmt(row.get(f"{metric}_median"))
            variance = _fmt(row.get(f"{metric}_variance"))
        lines.append(
            f"{row['size']:<6}{row['method']:<10}{row['params']:>10}{row['macs_per_frame']:>14}"
            f"{_fmt(row['file_size_mb'], 2):>8}{median:>10}{variance:>10}"
        )
    return lines


def plot_snr_sweep(records, path, metric="si_sdr"):
    fig, ax = plt.subplots(figsize=(7, 4))
    models = list(dict.fromkeys(r["model"] for r in records if r["metric"] == metric))
    for model in models:
        cells = sorted((r for r in records if r["metric"] == metric and r["model"] == model), key=lambda r: r["snr_db"])
        snrs = [c["snr_db"] for c in cells]
        medians = [c["median"] for c in cells]
        spread = [c["variance"] ** 0.5 for c in cells]
        ax.plot(snrs, medians, marker="o", label=model, linestyle="--" if model == "noisy" else "-")
        ax.fill_between(snrs, [m - s for m, s in zip(medians, spread)], [m + s for m, s in zip(medians, spread)], alpha=0.15)
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel(f"median {metric} (band: ±sqrt of population variance)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_size_sweep(rows, path, metric="si_sdr"):
    fig, ax = plt.subplots(figsize=(7, 4))
    present = [r for r in rows if not r["absent"] and r["method"] != "teacher"]
    for method in dict.fromkeys(r["method"] for r in present):
        points = sorted((r for r in present if r["method"] == method), key=lambda r: r["macs_per_frame"])
        ax.plot(
            [p["macs_per_frame"] / 1e9 for p in points],
            [p[f"{metric}_median"] for p in points],
            marker="o",
            label=method,
        )
    teacher = [r for r in rows if r["method"] == "teacher" and not r["absent"]]
    if teacher:
        ax.axhline(teacher[0][f"{metric}_median"], color="black", linestyle="--", label=f"teacher ({teacher[0]['size']})")
    ax.set_xscale("log")
    ax.set_xlabel("GMACs per frame")
    ax.set_ylabel(f"median {metric}")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def build_report(eval_dir):
    """
    Regenerate summary.txt and the SVG plots from the records in eval_dir.

    Returns:
        list: Paths written.
    """
    written = []
    lines = []
    snr_path = os.path.join(eval_dir, SNR_RECORDS)
    size_path = os.path.join(eval_dir, SIZE_RECORDS)
    if not os.path.isfile(snr_path) and not os.path.isfile(size_path):
        raise FileNotFoundError(f"No evaluation records in {eval_dir}; run the evaluate command first")

    if os.path.isfile(snr_path):
        records = read_jsonl(snr_path)
        for metric in dict.fromkeys(r["metric"] for r in records):
            lines += snr_table(records, metric) + [""]
        written.append(plot_snr_sweep(records, os.path.join(eval_dir, SNR_PLOT)))

    if os.path.isfile(size_path):
        rows = read_jsonl(size_path)
        lines += size_table(rows) + [""]
        written.append(plot_size_sweep(rows, os.path.join(eval_dir, SIZE_PLOT)))

    summary_path = os.path.join(eval_dir, SUMMARY)
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    written.append(summary_path)
    logger.info(f"Report written to {eval_dir}")
    return written
