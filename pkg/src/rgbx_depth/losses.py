"""Scale-adaptive depth losses and the related losses they generalize.

Every loss takes the prediction ``d`` as an H x W :class:`Tensor` (or array)
and ground truth / raw input as :class:`DepthField`. Sums run over pixels
that are valid in the ground truth.
"""

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import DepthField

EPSILON = 1e-6
VARIANTS = ("g2s", "zs", "ms")
OPERATORS = ("sobel", "diff")
QUANTUM = 1e-6


class RegressionCase(enum.Enum):
    AFFINE = "affine"  # no valid X pixel: scale and shift both free
    SCALE = "scale"  # one distinct X value: scale free, anchored at that value
    DIRECT = "direct"  # two or more distinct X values: d must equal z


@dataclass
class StandardizeStats:
    center: float
    spread: float
    epsilon: float


@dataclass
class LossConfig:
    lam: float = 0.5
    epsilon: float = EPSILON
    variant: str = "g2s"
    operator: str = "sobel"
    scales: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.operator not in OPERATORS:
            raise ValueError(f"operator must be one of {OPERATORS}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class LossBreakdown:
    total: float
    sa_term: float
    sg_term: float
    lam: float
    case: RegressionCase
    valid_count: int
    distinct_count: int
    loss: Tensor = None  # differentiable total


def _mask_of(field_or_mask):
    if isinstance(field_or_mask, DepthField):
        return field_or_mask.valid
    return np.asarray(field_or_mask, dtype=bool)


def _values_of(a):
    if isinstance(a, DepthField):
        return Tensor(a.values)
    return ad.as_tensor(a)


def standardize(a, domain_mask, variant="g2s", epsilon=EPSILON):
    """Center and scale ``a`` with statistics taken over ``domain_mask``.

    g2s: mean and mean absolute deviation; zs: mean and standard deviation;
    ms: median and mean absolute deviation from the median.
    Returns the standardized tensor (all pixels) and the statistics.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    a = _values_of(a)
    mask = _mask_of(domain_mask)
    count = int(mask.sum())
    if count == 0:
        return a * 0.0, StandardizeStats(0.0, 0.0, epsilon)
    weights = mask.astype(np.float64)
    if variant == "ms":
        flat = ad.reshape(a, (-1,))
        idx = np.flatnonzero(mask)
        order = idx[np.argsort(a.data.ravel()[idx], kind="stable")]
        if count % 2:
            center = flat[order[count // 2]]
        else:
            center = (flat[order[count // 2 - 1]] + flat[order[count // 2]]) * 0.5
    else:
        center = ad.reduce("sum", a, weights) * (1.0 / count)
    centered = a - center
    if variant == "zs":
        spread = ad.sqrt(ad.reduce("sum", ad.square(centered), weights) * (1.0 / count))
    else:
        spread = ad.reduce("sum", ad.abs(centered), weights) * (1.0 / count)
    out = centered / (spread + epsilon)
    return out, StandardizeStats(center.item(), spread.item(), epsilon)


def _residual(d, z, variant, epsilon):
    sd, _ = standardize(d, z.valid, variant, epsilon)
    sz, _ = standardize(z.values, z.valid, variant, epsilon)
    return sd - sz


def loss_sa(d, z, x, variant="g2s", epsilon=EPSILON):
    """Relative term over GT-valid pixels plus absolute term over pixels valid in X and GT."""
    d = ad.as_tensor(d)
    relative = ad.reduce("mean", ad.abs(_residual(d, z, variant, epsilon)), z.valid, epsilon)
    both = x.valid & z.valid
    absolute = ad.reduce("mean", ad.abs(d - z.values), both, epsilon)
    return relative + absolute


def _support(mask, operator):
    """Pixels whose whole stencil footprint lies on valid pixels (frame border is invalid)."""
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    if operator == "sobel":
        offsets = [(i, j) for i in range(3) for j in range(3)]
    else:
        offsets = [(1, 1), (1, 2), (2, 1)]
    out = np.ones((h, w), dtype=bool)
    for i, j in offsets:
        out &= padded[i:i + h, j:j + w]
    return out


def _pool_mask(mask):
    h, w = mask.shape
    return mask.reshape(h // 2, 2, w // 2, 2).all(axis=(1, 3))


def loss_sg(d, z, variant="g2s", epsilon=EPSILON, operator="sobel", scales=4):
    """Multi-scale gradient matching of the standardized residual.

    At scale k the residual is average-pooled k - 1 times; each scale's sum of
    |grad_h| + |grad_w| is normalized by its count of uncontaminated pixels.
    """
    if operator not in OPERATORS:
        raise ValueError(f"operator must be one of {OPERATORS}")
    d = ad.as_tensor(d)
    h, w = d.shape
    mask = z.valid
    residual = ad.reshape(_residual(d, z, variant, epsilon) * mask.astype(np.float64),
                          (1, 1, h, w))
    grad_op = ad.sobel_gradients if operator == "sobel" else ad.diff_gradients
    total = None
    for k in range(scales):
        if k > 0:
            hh, ww = residual.shape[2:]
            if hh % 2 or ww % 2 or min(hh, ww) // 2 < 3:
                warnings.warn(f"field of size {h}x{w} supports only {k} of {scales} "
                              "gradient scales", RuntimeWarning, stacklevel=2)
                break
            residual = ad.avg_downsample2(residual)
            mask = _pool_mask(mask)
        elif min(h, w) < 3:
            raise ValueError(f"field of size {h}x{w} is too small for a gradient term")
        gh, gw = grad_op(residual)
        support = _support(mask, operator)[None, None].astype(np.float64)
        term = ad.reduce("mean", ad.abs(gh) + ad.abs(gw), support, epsilon)
        total = term if total is None else total + term
    return total


def regression_case(x):
    """Classify raw input X by the number of distinct valid intensities."""
    vals = x.values[x.valid]
    distinct = int(np.unique(np.round(vals / QUANTUM)).size)
    if distinct == 0:
        case = RegressionCase.AFFINE
    elif distinct == 1:
        case = RegressionCase.SCALE
    else:
        case = RegressionCase.DIRECT
    return case, int(vals.size), distinct


def loss_g2(d, z, x, config=None):
    """Scale-adaptive term plus lambda times the gradient term."""
    config = config or LossConfig()
    sa = loss_sa(d, z, x, config.variant, config.epsilon)
    sg = loss_sg(d, z, config.variant, config.epsilon, config.operator, config.scales)
    total = sa + sg * config.lam
    case, valid_count, distinct = regression_case(x)
    return LossBreakdown(total=total.item(), sa_term=sa.item(), sg_term=sg.item(),
                         lam=config.lam, case=case, valid_count=valid_count,
                         distinct_count=distinct, loss=total)


def loss_l1(d, z, epsilon=EPSILON):
    d = ad.as_tensor(d)
    return ad.reduce("mean", ad.abs(d - z.values), z.valid, epsilon)


def loss_l2(d, z, epsilon=EPSILON):
    d = ad.as_tensor(d)
    return ad.reduce("mean", ad.square(d - z.values), z.valid, epsilon)


def loss_scale_invariant(d, z, floor=1e-6):
    """Log-space variance of d / z over GT-valid pixels.

    Uses the 1/M^2 coefficient on the squared sum so that the value is
    unchanged by d -> s * d.
    """
    d = ad.as_tensor(d)
    count = z.valid_count
    if count == 0:
        return ad.reduce("sum", d * 0.0)
    weights = z.valid.astype(np.float64)
    delta = ad.log(ad.clamp_min(d, floor)) - np.log(np.maximum(z.values, floor))
    first = ad.reduce("sum", ad.square(delta), weights) * (1.0 / count)
    second = ad.square(ad.reduce("sum", delta, weights)) * (1.0 / count ** 2)
    return first - second


def loss_affine_invariant(d, z, epsilon=EPSILON):
    """Mean absolute difference of median-standardized fields."""
    d = ad.as_tensor(d)
    sd, _ = standardize(d, z.valid, "ms", epsilon)
    sz, _ = standardize(z.values, z.valid, "ms", epsilon)
    return ad.reduce("mean", ad.abs(sd - sz), z.valid, epsilon)


def ordinal_labels(values_i, values_j, tau=0.01, floor=1e-6):
    """+1 / -1 / 0 ordinal relation of value pairs using a ratio threshold."""
    ratio = np.maximum(values_i, floor) / np.maximum(values_j, floor)
    return np.where(ratio >= 1 + tau, 1, np.where(ratio <= 1 / (1 + tau), -1, 0))


def loss_ranking(d, z, pairs, tau=0.01):
    """Pairwise ranking loss; ``pairs`` is a (P, 2) array of flat pixel indices."""
    d = ad.as_tensor(d)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return ad.reduce("sum", d * 0.0)
    zf = z.values.ravel()
    labels = ordinal_labels(zf[pairs[:, 0]], zf[pairs[:, 1]], tau).astype(np.float64)
    flat = ad.reshape(d, (-1,))
    diff = flat[pairs[:, 0]] - flat[pairs[:, 1]]
    ordered = (labels != 0).astype(np.float64)
    logistic = ad.softplus(diff * -labels)
    terms = logistic * ordered + ad.square(diff) * (1.0 - ordered)
    return ad.reduce("mean", terms)
