"""Evaluation metrics on plain numpy arrays (no autodiff).

All metrics are computed over pixels that are valid in the ground truth.
"""

import warnings
from dataclasses import asdict, dataclass

import numpy as np

TAU = 0.01
EPSILON = 1e-6
DEFAULT_PAIRS = 50_000


@dataclass
class MetricReport:
    oe: float
    srmse: float
    rmse: float
    abs_rel: float
    pixel_count: int
    pair_count: int

    def to_dict(self):
        return asdict(self)


def _prediction(d):
    return np.asarray(getattr(d, "values", d), dtype=np.float64)


def ordinal(ratio, tau=TAU):
    return np.where(ratio >= 1 + tau, 1, np.where(ratio <= 1 / (1 + tau), -1, 0))


def decode_pairs(k, n):
    """Map linear indices into the strict upper triangle of an n x n matrix to (i, j)."""
    k = np.asarray(k, dtype=np.int64)
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - n * (n - 1) // 2 + (n - i) * (n - i - 1) // 2
    return i, j


def sample_pairs(n, pair_count, seed):
    """All pairs when there are at most ``pair_count``, else a uniform sample without replacement."""
    total = n * (n - 1) // 2
    if total <= pair_count:
        return np.triu_indices(n, 1)
    rng = np.random.default_rng(seed)
    k = np.sort(rng.choice(total, size=pair_count, replace=False))
    return decode_pairs(k, n)


def metric_oe(d, z, pair_count=DEFAULT_PAIRS, seed=0, tau=TAU, floor=1e-6):
    """Fraction of pixel pairs whose ordinal relation in ``d`` disagrees with ``z``."""
    pred = _prediction(d)
    domain = z.valid & (z.values > 0)
    n = int(domain.sum())
    if n < 2:
        warnings.warn("ordinal error needs at least two valid pixels", RuntimeWarning, stacklevel=2)
        return 0.0
    dv = np.maximum(pred[domain], floor)
    zv = z.values[domain]
    i, j = sample_pairs(n, pair_count, seed)
    disagree = ordinal(dv[i] / dv[j], tau) != ordinal(zv[i] / zv[j], tau)
    return float(disagree.mean())


def _g2s(values, epsilon):
    center = values.mean()
    spread = np.abs(values - center).mean()
    return (values - center) / (spread + epsilon)


def metric_srmse(d, z, epsilon=EPSILON):
    """RMSE between mean / mean-deviation standardized prediction and ground truth."""
    pred = _prediction(d)
    if not z.valid.any():
        warnings.warn("SRMSE on an empty ground-truth mask", RuntimeWarning, stacklevel=2)
        return 0.0
    diff = _g2s(pred[z.valid], epsilon) - _g2s(z.values[z.valid], epsilon)
    return float(np.sqrt(np.mean(diff ** 2)))


def metric_rmse(d, z):
    pred = _prediction(d)
    if not z.valid.any():
        warnings.warn("RMSE on an empty ground-truth mask", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.sqrt(np.mean((pred[z.valid] - z.values[z.valid]) ** 2)))


def metric_abs(d, z, floor=1e-6):
    """Mean absolute relative error over GT-valid pixels with z > floor."""
    pred = _prediction(d)
    domain = z.valid & (z.values > floor)
    if not domain.any():
        warnings.warn("Abs on an empty domain", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean(np.abs(pred[domain] - z.values[domain]) / z.values[domain]))


def evaluate_metrics(d, z, pair_count=DEFAULT_PAIRS, seed=0, epsilon=EPSILON):
    n = int((z.valid & (z.values > 0)).sum())
    return MetricReport(
        oe=metric_oe(d, z, pair_count, seed),
        srmse=metric_srmse(d, z, epsilon),
        rmse=metric_rmse(d, z),
        abs_rel=metric_abs(d, z),
        pixel_count=int(z.valid.sum()),
        pair_count=min(n * (n - 1) // 2, pair_count),
    )
