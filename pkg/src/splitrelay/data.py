"""Synthetic Gaussian-blob classification data (reshapeable to square images)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    centers: np.ndarray

    @property
    def q(self) -> int:
        return len(self.centers)


def make_blobs(q: int = 4, dim: int = 64, per_class: int = 200, test_per_class: int = 100,
               spread: float = 0.1, seed: int = 0) -> Dataset:
    """Class centers uniform in [0.1, 0.9]^dim, isotropic Gaussian spread.

    Samples are ordered class by class; train and test share the centers.
    """
    centers = 0.1 + 0.8 * Stream.of("blobs", "centers", seed).uniform(q * dim).reshape(q, dim)

    def draw(tag, count):
        noise = Stream.of("blobs", tag, seed).normal(q * count * dim).reshape(q * count, dim)
        y = np.repeat(np.arange(q), count)
        return centers[y] + spread * noise, y

    x_train, y_train = draw("train", per_class)
    x_test, y_test = draw("test", test_per_class)
    return Dataset(x_train, y_train, x_test, y_test, centers)
