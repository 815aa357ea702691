"""Synthetic stand-in dataset in the exact CIFAR-10 binary layout.

Each class gets a fixed smooth color template; samples are the template
plus pixel noise, so even a small network separates the classes quickly.
Useful for smoke-training where the real dataset is unavailable.
"""

from __future__ import annotations

import os

import numpy as np

from .train import FILE_BYTES, NUM_CLASSES, RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES

__all__ = ["write_synthetic_cifar10", "class_templates"]


def class_templates(seed: int = 0) -> np.ndarray:
    """(10, 3, 32, 32) uint8 smooth templates, one per class."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(40.0, 215.0, size=(NUM_CLASSES, 3, 4, 4))
    templates = np.kron(coarse, np.ones((1, 1, 8, 8)))
    return np.clip(templates, 0, 255).astype(np.uint8)


def _write_file(path: str, templates: np.ndarray, rng: np.random.Generator) -> None:
    labels = np.tile(np.arange(NUM_CLASSES, dtype=np.uint8), RECORDS_PER_FILE // NUM_CLASSES)
    base = templates[labels].astype(np.int16)
    noise = rng.integers(-25, 26, size=base.shape, dtype=np.int16)
    images = np.clip(base + noise, 0, 255).astype(np.uint8)
    records = np.empty((RECORDS_PER_FILE, 1 + images[0].size), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(RECORDS_PER_FILE, -1)
    data = records.tobytes()
    assert len(data) == FILE_BYTES
    with open(path, "wb") as fh:
        fh.write(data)


def write_synthetic_cifar10(directory, seed: int = 0) -> None:
    """Write 5 train files and 1 test file, byte-compatible with CIFAR-10."""
    os.makedirs(directory, exist_ok=True)
    templates = class_templates(seed)
    rng = np.random.default_rng(seed + 1)
    for name in TRAIN_FILES:
        _write_file(os.path.join(directory, name), templates, rng)
    _write_file(os.path.join(directory, TEST_FILE), templates, rng)
