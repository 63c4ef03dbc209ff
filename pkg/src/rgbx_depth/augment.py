"""Raw-depth degradation: noise, blur, sparsity and holes applied to a GT map.

Each stage is a pure function of its inputs and a seed. ``make_training_sample``
composes them with independent gates; per-stage seeds are split from the
sample seed with ``numpy.random.SeedSequence``.
"""

import functools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .fields import DepthField, TrainingSample, check_rgb

SALT, PEPPER = 1.0, 0.0
SIZE_MULTIPLE = 16


@dataclass
class AugmentConfig:
    gaussian_std_range: tuple = (0.01, 0.1)
    saltpepper_prob_range: tuple = (0.0, 1.0)
    zoom_factors: tuple = (2, 4, 8, 16)
    sparsity_range: tuple = (0.0, 1.0)
    # "uniform": rate ~ U(sparsity_range). "mixed": atoms at 0 and 1, else
    # log-uniform on [rate_log_floor, 1] so very sparse inputs are common.
    rate_mode: str = "uniform"
    rate_zero_prob: float = 0.2
    rate_one_prob: float = 0.2
    rate_log_floor: float = 3e-4
    hole_count_range: tuple = (1, 3)
    hole_library_size: int = 32
    flip_prob: float = 0.5
    gate_probs: dict = field(default_factory=lambda: {
        "gaussian": 0.5, "saltpepper": 0.5, "blur": 0.5, "holes": 0.5})
    target_height: int = 64
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.gaussian_std_range
        if not 0.01 <= lo < hi <= 0.1:
            raise ValueError("gaussian_std_range must lie within [0.01, 0.1]")
        for name in ("saltpepper_prob_range", "sparsity_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"{name} must be a non-degenerate range within [0, 1]")
        if not set(self.zoom_factors) <= {2, 4, 8, 16} or not self.zoom_factors:
            raise ValueError("zoom factors must be drawn from {2, 4, 8, 16}")
        lo, hi = self.hole_count_range
        if not 0 <= lo <= hi:
            raise ValueError("hole_count_range must satisfy 0 <= lo <= hi")
        if self.rate_mode not in ("uniform", "mixed"):
            raise ValueError("rate_mode must be 'uniform' or 'mixed'")
        if self.rate_zero_prob + self.rate_one_prob > 1.0:
            raise ValueError("rate endpoint probabilities exceed 1")

    def to_dict(self):
        d = asdict(self)
        for key in ("gaussian_std_range", "saltpepper_prob_range", "zoom_factors",
                    "sparsity_range", "hole_count_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("gaussian_std_range", "saltpepper_prob_range", "zoom_factors",
                    "sparsity_range", "hole_count_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def seed_sequence(seed):
    """Accept an int, a sequence of ints, or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


# ---------------------------------------------------------------------------
# Stages


def add_gaussian_noise(z, std, seed):
    """Add N(0, std^2) at valid pixels and clamp at 0."""
    if not 0.01 <= std <= 0.1:
        raise ValueError(f"gaussian std {std} outside [0.01, 0.1]")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, std, z.shape)
    values = np.where(z.valid, np.maximum(z.values + noise, 0.0), 0.0)
    return DepthField(values, z.valid.copy())


def add_salt_pepper(z, prob, seed):
    """Replace each valid pixel with probability ``prob`` by 0 or 1 (equal odds)."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"salt-and-pepper probability {prob} outside [0, 1]")
    rng = np.random.default_rng(seed)
    hit = (rng.random(z.shape) < prob) & z.valid
    salt = rng.random(z.shape) < 0.5
    values = np.where(hit, np.where(salt, SALT, PEPPER), z.values)
    return DepthField(values, z.valid.copy())


def blur_downup(z, zoom):
    """Block-average by ``zoom`` and replicate back; a block stays valid only if fully valid."""
    if zoom not in (2, 4, 8, 16):
        raise ValueError(f"zoom must be one of 2, 4, 8, 16, got {zoom}")
    h, w = z.shape
    ph, pw = (-h) % zoom, (-w) % zoom
    values = np.pad(z.values, ((0, ph), (0, pw)), mode="reflect") if ph or pw else z.values
    valid = np.pad(z.valid, ((0, ph), (0, pw)), mode="reflect") if ph or pw else z.valid
    bh, bw = values.shape[0] // zoom, values.shape[1] // zoom
    blocks = values.reshape(bh, zoom, bw, zoom)
    vblocks = valid.reshape(bh, zoom, bw, zoom)
    means = blocks.mean(axis=(1, 3))
    keep = vblocks.all(axis=(1, 3))
    up = np.repeat(np.repeat(np.where(keep, means, 0.0), zoom, 0), zoom, 1)[:h, :w]
    upmask = np.repeat(np.repeat(keep, zoom, 0), zoom, 1)[:h, :w]
    return DepthField(up, upmask)


def sparsify(z, rate, seed):
    """Keep each valid pixel independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"sampling rate {rate} outside [0, 1]")
    rng = np.random.default_rng(seed)
    keep = (rng.random(z.shape) < rate) & z.valid
    return DepthField(np.where(keep, z.values, 0.0), keep)


def _convex_polygon(shape, rng):
    h, w = shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    radius = rng.uniform(0.05, 0.3) * min(h, w)
    angles = np.sort(rng.uniform(0, 2 * np.pi, rng.integers(3, 8)))
    py, px = cy + radius * np.sin(angles), cx + radius * np.cos(angles)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = np.ones(shape, dtype=bool)
    # counter-clockwise vertices: inside is left of every edge
    for k in range(len(angles)):
        y0, x0 = py[k], px[k]
        y1, x1 = py[(k + 1) % len(angles)], px[(k + 1) % len(angles)]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def _ellipse(shape, rng):
    h, w = shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ay, ax = rng.uniform(0.03, 0.25, 2) * np.array([h, w])
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def synth_hole_masks(n, size, seed, coverage=(0.01, 0.30)):
    """``n`` keep-masks (False marks a hole) made of unioned ellipses and polygons."""
    if n < 1:
        raise ValueError("need at least one hole mask")
    rng = np.random.default_rng(seed)
    masks = []
    while len(masks) < n:
        target = rng.uniform(*coverage)
        hole = np.zeros(size, dtype=bool)
        while hole.mean() < target:
            shape = _ellipse(size, rng) if rng.random() < 0.5 else _convex_polygon(size, rng)
            hole |= shape
        if coverage[0] <= hole.mean() <= coverage[1]:
            masks.append(~hole)
    return masks


@functools.lru_cache(maxsize=8)
def _hole_library(n, size, seed):
    return tuple(synth_hole_masks(n, size, seed))


def transform_hole(keep, shape, rng, scale_range=(0.5, 2.0)):
    """Random crop, similarity transform and flips of a keep-mask, resampled to ``shape``."""
    h0, w0 = keep.shape
    ch = int(rng.integers(max(1, h0 // 2), h0 + 1))
    cw = int(rng.integers(max(1, w0 // 2), w0 + 1))
    top, left = int(rng.integers(0, h0 - ch + 1)), int(rng.integers(0, w0 - cw + 1))
    crop = keep[top:top + ch, left:left + cw]
    if rng.random() < 0.5:
        crop = crop[:, ::-1]
    if rng.random() < 0.5:
        crop = crop[::-1, :]
    h, w = shape
    theta = rng.uniform(0, 2 * np.pi)
    scale = rng.uniform(*scale_range)
    # output pixel -> crop pixel: undo rotation and scale about the centers,
    # then stretch the frame onto the crop
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    stretch = np.diag([ch / h, cw / w])
    matrix = stretch @ rot / scale
    out_center = np.array([(h - 1) / 2, (w - 1) / 2])
    in_center = np.array([(ch - 1) / 2, (cw - 1) / 2])
    offset = in_center - matrix @ out_center
    warped = ndimage.affine_transform(crop.astype(np.float64), matrix, offset=offset,
                                      output_shape=shape, order=0, cval=1.0)
    return warped > 0.5


def inject_holes(z, holes, count, seed, transform=True):
    """Invalidate pixels under ``count`` randomly chosen and transformed hole masks."""
    if count == 0:
        return z.copy()
    if not holes:
        raise ValueError("hole library is empty")
    rng = np.random.default_rng(seed)
    valid = z.valid.copy()
    for _ in range(count):
        keep = np.asarray(holes[int(rng.integers(len(holes)))], dtype=bool)
        if transform:
            keep = transform_hole(keep, z.shape, rng)
        elif keep.shape != z.shape:
            raise ValueError(f"hole mask {keep.shape} does not match field {z.shape}")
        valid &= keep
    return DepthField(np.where(valid, z.values, 0.0), valid)


# ---------------------------------------------------------------------------
# Geometry helpers


def resize_nearest(a, shape):
    h, w = a.shape[:2]
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(int), w - 1)
    return a[rows][:, cols]


def resize_bilinear(a, shape):
    """Half-pixel-centered bilinear resize of an H x W (x C) array."""
    h, w = a.shape[:2]
    ys = np.clip((np.arange(shape[0]) + 0.5) * h / shape[0] - 0.5, 0, h - 1)
    xs = np.clip((np.arange(shape[1]) + 0.5) * w / shape[1] - 0.5, 0, w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    if a.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def target_shape(shape, target_height, multiple=SIZE_MULTIPLE):
    h, w = shape
    width = int(w * target_height / h) // multiple * multiple
    if width < multiple:
        raise ValueError(f"image {h}x{w} is too narrow for height {target_height}")
    return target_height, width


def prepare_scene(rgb, z, target_height):
    """Rescale depth to [0, 1] by its max valid value and resize to ``target_height``."""
    rgb = check_rgb(rgb)
    if rgb.shape[:2] != z.shape:
        raise ValueError(f"RGB {rgb.shape[:2]} and depth {z.shape} are not aligned")
    if z.valid_count == 0 or z.values[z.valid].max() <= 0:
        raise ValueError("ground truth has no valid positive depth")
    gt = DepthField(z.values / z.values[z.valid].max(), z.valid)
    shape = target_shape(z.shape, target_height)
    if shape != z.shape:
        rgb = resize_bilinear(rgb, shape)
        gt = DepthField(resize_nearest(gt.values, shape), resize_nearest(gt.valid, shape))
    return rgb, gt


def flip_horizontal(rgb, *fields):
    return (rgb[:, ::-1].copy(),) + tuple(DepthField(f.values[:, ::-1], f.valid[:, ::-1])
                                          for f in fields)


def draw_rate(config, rng):
    lo, hi = config.sparsity_range
    if config.rate_mode == "uniform":
        return float(rng.uniform(lo, hi))
    u = rng.random()
    if u < config.rate_zero_prob:
        return 0.0
    if u < config.rate_zero_prob + config.rate_one_prob:
        return 1.0
    floor = max(config.rate_log_floor, lo) if lo > 0 else config.rate_log_floor
    return float(np.clip(np.exp(rng.uniform(np.log(floor), np.log(hi))), lo, hi))


def degrade(gt, config, seed):
    """Build X from a copy of GT through the gated stages; returns (X, record)."""
    stage_seeds = seed_sequence(seed).spawn(6)
    gates = np.random.default_rng(stage_seeds[0])
    x = gt.copy()
    record = {}
    probs = config.gate_probs
    if gates.random() < probs.get("gaussian", 0.5):
        std = float(gates.uniform(*config.gaussian_std_range))
        x = add_gaussian_noise(x, std, stage_seeds[1])
        record["gaussian_std"] = std
    if gates.random() < probs.get("saltpepper", 0.5):
        prob = float(gates.uniform(*config.saltpepper_prob_range))
        x = add_salt_pepper(x, prob, stage_seeds[2])
        record["saltpepper_prob"] = prob
    if gates.random() < probs.get("blur", 0.5):
        zoom = int(gates.choice(config.zoom_factors))
        x = blur_downup(x, zoom)
        record["zoom"] = zoom
    rate = draw_rate(config, gates)
    x = sparsify(x, rate, stage_seeds[3])
    record["rate"] = rate
    if gates.random() < probs.get("holes", 0.5):
        lo, hi = config.hole_count_range
        count = int(gates.integers(lo, hi + 1))
        library = _hole_library(config.hole_library_size, tuple(gt.shape), config.seed)
        x = inject_holes(x, library, count, stage_seeds[4])
        record["holes"] = count
    return x, record


def make_training_sample(rgb, z, config=None, seed=0):
    """Normalize, resize, maybe flip, and degrade one (RGB, GT) pair."""
    config = config or AugmentConfig()
    rgb, gt = prepare_scene(rgb, z, config.target_height)
    seeds = seed_sequence(seed).spawn(2)
    if np.random.default_rng(seeds[0]).random() < config.flip_prob:
        rgb, gt = flip_horizontal(rgb, gt)
    x, _ = degrade(gt, config, seeds[1])
    return TrainingSample(rgb=rgb, x=x, gt=gt)
