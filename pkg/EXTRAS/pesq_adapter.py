"""
Wideband PESQ adapter for `core.py evaluate --pesq-adapter EXTRAS/pesq_adapter.py`.

Usage: python EXTRAS/pesq_adapter.py REF.wav DEG.wav
Prints one score on stdout and exits 0, or prints the reason on stderr and exits 1.
"""

import sys

import soundfile as sf
from pesq import PesqError, pesq

SAMPLE_RATE = 16000


def score(ref_path, deg_path):
    ref, ref_sr = sf.read(ref_path, dtype="float32")
    deg, deg_sr = sf.read(deg_path, dtype="float32")
    if ref_sr != SAMPLE_RATE or deg_sr != SAMPLE_RATE:
        raise ValueError(f"wideband PESQ needs {SAMPLE_RATE} Hz input, got {ref_sr} and {deg_sr}")
    return pesq(SAMPLE_RATE, ref, deg, "wb")


def main(argv):
    if len(argv) != 2:
        print("usage: pesq_adapter.py REF.wav DEG.wav", file=sys.stderr)
        return 1
    try:
        value = score(argv[0], argv[1])
    except (PesqError, ValueError, RuntimeError) as error:
        print(f"PESQ failed: {error}", file=sys.stderr)
        return 1
    print(f"{value:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
