"""Logging, seeding and file helpers."""

import logging
import os
import sys
import tempfile
import zlib
from pathlib import Path

import numpy as np


def setup_logging(level: str = "INFO") -> None:
    """Configure root logger; progress goes to stderr so stdout stays data-only."""
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(
        level=numeric_level,
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )
    # Quiet down noisy libraries
    logging.getLogger("asyncio").setLevel(logging.WARNING)


def derive_seed(master_seed: int, *labels: str) -> int:
    """Derive a subsystem seed from the experiment seed.

    Each label is hashed with CRC-32 into the SeedSequence spawn key, so
    ("model",) and ("attention/feature",) streams never overlap and adding a
    new label leaves existing streams untouched.
    """
    spawn_key = tuple(zlib.crc32(label.encode("utf-8")) for label in labels)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=spawn_key)
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the algorithm is pinned for cross-platform reproducibility."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def atomic_write_text(path: Path, text: str) -> str:
    """Write text via temp file + rename so readers never see partial files.

    Returns the path of the written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return str(path)
