"""Depth and color grids shared by every module."""

from dataclasses import dataclass

import numpy as np


@dataclass
class DepthField:
    """H x W depth values plus a validity mask.

    Invalid pixels always store 0 in ``values``. Valid pixels may be 0
    (e.g. pepper noise), so validity is carried by ``valid`` alone.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError(f"values {self.values.shape} and mask {self.valid.shape} "
                             "must be matching 2-D arrays")
        self.values = np.where(self.valid, self.values, 0.0)

    @classmethod
    def dense(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape, dtype=bool))

    @property
    def shape(self):
        return self.values.shape

    @property
    def valid_count(self):
        return int(self.valid.sum())

    @property
    def valid_fraction(self):
        return self.valid_count / self.valid.size

    def copy(self):
        return DepthField(self.values.copy(), self.valid.copy())

    def __eq__(self, other):
        return (isinstance(other, DepthField)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.valid, other.valid))


@dataclass
class TrainingSample:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    x: DepthField
    gt: DepthField


def check_rgb(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 color array, got {rgb.shape}")
    return rgb
