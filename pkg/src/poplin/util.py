"""Shared helpers: seed derivation and CSV writing."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic child seed from a base seed and integer context keys.

    Distinct key tuples give statistically independent streams, so the
    planner, dynamics training, and evaluation never share RNG state.
    """
    ss = np.random.SeedSequence((int(base),) + tuple(int(k) for k in keys))
    return int(ss.generate_state(1)[0])


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal form, stable for byte-identical CSVs."""
    return repr(float(x))


def write_csv(path: str | Path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
            )
