"""Procedural RGB + depth scenes with indoor- and outdoor-scale depth ranges.

A scene is a back wall and a ground plane with rectangles, tilted planes and
spheres composited by z-buffer. Every surface gets its own flat albedo, which
is then shaded from depth-derived normals and hazed with relative depth, so
color edges coincide with object boundaries.
"""

from dataclasses import dataclass

import numpy as np

from .fields import DepthField

BANDS = {"indoor": (1.0, 10.0), "outdoor": (10.0, 100.0)}
LIGHT = np.array([-0.4, -0.5, 0.77])
HAZE = np.array([0.75, 0.8, 0.85])


@dataclass
class SceneSpec:
    seed: int
    depth_range: tuple
    primitive_count: int = 5
    size: tuple = (64, 64)

    def __post_init__(self):
        lo, hi = self.depth_range
        if not hi > lo > 0:
            raise ValueError(f"depth range must satisfy max > min > 0, got {self.depth_range}")
        if self.primitive_count < 1:
            raise ValueError("primitive_count must be >= 1")


def draw_depth_range(band, rng):
    lo, hi = BANDS[band]
    span = hi - lo
    near = rng.uniform(lo, lo + 0.4 * span)
    far = rng.uniform(near + 0.3 * span, hi)
    return float(near), float(far)


def _albedos(count, rng):
    # evenly spaced hues with jitter keep neighbouring surfaces distinguishable
    hues = (np.arange(count) / count + rng.uniform(0, 1)) % 1.0
    rng.shuffle(hues)
    sat = rng.uniform(0.4, 0.9, count)
    val = rng.uniform(0.5, 1.0, count)
    k = (np.array([5, 3, 1])[None] + hues[:, None] * 6) % 6
    rgb = val[:, None] - val[:, None] * sat[:, None] * np.clip(np.minimum(k, 4 - k), 0, 1)
    return rgb


def generate_scene(spec, return_labels=False):
    """Render ``spec`` to (rgb H x W x 3 in [0, 1], fully valid depth in meters)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    near, far = spec.depth_range
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    depth = np.full((h, w), far)
    labels = np.zeros((h, w), dtype=np.int64)

    # ground plane: inverse depth linear in image row below the horizon
    horizon = rng.uniform(0.3, 0.6) * h
    ground_near = near + rng.uniform(0.0, 0.3) * (far - near)
    below = yy > horizon
    t = np.clip((yy - horizon) / (h - 1 - horizon), 0.0, 1.0)
    ground = 1.0 / (1.0 / far + t * (1.0 / ground_near - 1.0 / far))
    take = below & (ground < depth)
    depth[take] = ground[take]
    labels[take] = 1

    for k in range(spec.primitive_count):
        kind = rng.integers(3)
        # sample in inverse depth so near objects are common
        center = 1.0 / rng.uniform(1.0 / far, 1.0 / near)
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.1, 0.9) * w
        if kind == 2:
            radius = rng.uniform(0.08, 0.22) * min(h, w)
            rho2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius ** 2
            cover = rho2 < 1.0
            surf = center - 0.15 * center * np.sqrt(np.clip(1.0 - rho2, 0.0, 1.0))
        else:
            hh, hw = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
            cover = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < hw)
            if kind == 0:
                surf = np.full((h, w), center)
            else:
                gy, gx = rng.uniform(-0.5, 0.5, 2) * center / max(h, w)
                surf = center + gy * (yy - cy) + gx * (xx - cx)
        surf = np.clip(surf, near, far)
        take = cover & (surf < depth)
        depth[take] = surf[take]
        labels[take] = k + 2

    depth = np.clip(depth, near, far)
    rgb = _shade(depth, labels, spec.primitive_count + 2, near, far, rng)
    field = DepthField.dense(depth)
    if return_labels:
        return rgb, field, labels
    return rgb, field


def _shade(depth, labels, n_labels, near, far, rng):
    rel = depth / far
    gy, gx = np.gradient(rel)
    normals = np.stack([-gx * 20.0, -gy * 20.0, np.ones_like(rel)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    light = LIGHT / np.linalg.norm(LIGHT)
    shade = 0.35 + 0.65 * np.clip(normals @ light, 0.0, 1.0)
    albedo = _albedos(n_labels, rng)[labels]
    haze = 0.5 * ((depth - near) / (far - near))[..., None]
    rgb = albedo * shade[..., None] * (1.0 - haze) + HAZE * haze
    return np.clip(rgb, 0.0, 1.0)


def split_specs(n, seed, size=(64, 64), primitive_range=(3, 8)):
    """Scene specs for a split: per-scene seeds by splitting, balanced band mix."""
    if n < 1:
        raise ValueError("a split needs at least one scene")
    root = np.random.SeedSequence(seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    bands = np.array(["indoor", "outdoor"] * ((n + 1) // 2))[:n]
    if n % 2:
        bands[-1] = rng.choice(["indoor", "outdoor"])
    rng.shuffle(bands)
    specs = []
    for band, child in zip(bands, root.spawn(n)):
        scene_rng = np.random.default_rng(child)
        specs.append(SceneSpec(
            seed=int(child.generate_state(1)[0]),
            depth_range=draw_depth_range(str(band), scene_rng),
            primitive_count=int(scene_rng.integers(primitive_range[0], primitive_range[1] + 1)),
            size=tuple(size),
        ))
    return specs


def scene_band(spec):
    return "indoor" if spec.depth_range[1] <= BANDS["indoor"][1] else "outdoor"


def generate_split(n, seed, size=(64, 64), primitive_range=(3, 8)):
    """``n`` (rgb, depth) scenes, regenerated bit-for-bit from ``seed``."""
    return [generate_scene(spec) for spec in split_specs(n, seed, size, primitive_range)]
