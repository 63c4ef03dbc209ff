"""Quick internal consistency checks: gradients, metric oracles, harness oracle."""

import itertools
import warnings

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from .fields import DepthField
from .harness import EvalConfig, evaluate, fill_nearest
from .synthscenes import generate_split
from .unet import NetConfig, UNet, init_weights

GRAD_TOL = 1e-4
NET_GRAD_TOL = 1e-3
METRIC_TOL = 1e-10
NET_FD_STEP = 1e-6


def _field(rng, shape=(8, 8), hole_rate=0.2):
    return DepthField(rng.uniform(0.5, 5.0, shape), rng.random(shape) >= hole_rate)


def gradient_cases(seed=0):
    """(name, fn, arrays) triples covering every op and loss."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, (8, 8))
    b = rng.uniform(0.5, 2.0, (8, 8))
    signed = rng.normal(size=(8, 8)) + 0.3 * np.sign(rng.normal(size=(8, 8)))
    mask = rng.random((8, 8)) > 0.3
    z = _field(rng)
    xv = rng.random((8, 8)) < 0.2
    x = DepthField(z.values, xv & z.valid)
    pairs = rng.integers(0, 64, (40, 2))
    img = rng.normal(size=(2, 3, 8, 8))
    w3 = rng.normal(size=(4, 3, 3, 3)) * 0.3
    w1 = rng.normal(size=(4, 3, 1, 1)) * 0.3
    bias = rng.normal(size=4)
    cases = [
        ("add", lambda p, q: ad.reduce("sum", (p + q) * q), [a, b]),
        ("sub", lambda p, q: ad.reduce("sum", (p - q) * p), [a, b]),
        ("mul", lambda p, q: ad.reduce("sum", p * q * p), [a, b]),
        ("div", lambda p, q: ad.reduce("sum", p / q), [a, b]),
        ("neg", lambda p: ad.reduce("sum", -p * p), [a]),
        ("abs", lambda p: ad.reduce("sum", ad.abs(p) * p), [signed]),
        ("relu", lambda p: ad.reduce("sum", ad.relu(p) * p), [signed]),
        ("log", lambda p: ad.reduce("sum", ad.log(p)), [a]),
        ("exp", lambda p: ad.reduce("sum", ad.exp(p)), [a]),
        ("square", lambda p: ad.reduce("sum", ad.square(p)), [signed]),
        ("sqrt", lambda p: ad.reduce("sum", ad.sqrt(p)), [a]),
        ("softplus", lambda p: ad.reduce("sum", ad.softplus(p)), [signed]),
        ("mean_masked", lambda p: ad.reduce("mean", p * p, mask), [a]),
        ("take", lambda p: ad.reduce("sum", ad.reshape(p, (-1,))[pairs[:, 0]] * 2.0), [a]),
        ("conv3x3", lambda p, q: ad.reduce("sum", ad.square(ad.conv2d(p, q, bias))), [img, w3]),
        ("conv3x3_s2", lambda p, q: ad.reduce("sum", ad.square(ad.conv2d(p, q, stride=2))),
         [img, w3]),
        ("conv1x1", lambda p, q: ad.reduce("sum", ad.square(ad.conv2d(p, q))), [img, w1]),
        ("upsample", lambda p: ad.reduce("sum", ad.square(ad.nearest_upsample2(p))), [img]),
        ("downsample", lambda p: ad.reduce("sum", ad.square(ad.avg_downsample2(p))), [img]),
        ("concat", lambda p: ad.reduce("sum", ad.square(ad.concat_channels(p, p * 2.0))),
         [img]),
        ("sobel", lambda p: ad.reduce("sum", ad.square(ad.sobel_gradients(p)[0])
                                      + ad.square(ad.sobel_gradients(p)[1])), [img]),
        ("loss_g2", lambda p: losses.loss_g2(p, z, x).loss, [a]),
        ("loss_l1", lambda p: losses.loss_l1(p, z), [a]),
        ("loss_l2", lambda p: losses.loss_l2(p, z), [a]),
        ("loss_scale_invariant", lambda p: losses.loss_scale_invariant(p, z), [a]),
        ("loss_affine_invariant", lambda p: losses.loss_affine_invariant(p, z), [a]),
        ("loss_ranking", lambda p: losses.loss_ranking(p, z, pairs), [a]),
    ]
    return cases


def toy_net_case(seed=0):
    """Scalar loss of a tiny ReZero U-Net as a function of one conv weight and its input."""
    net = init_weights(UNet(NetConfig(levels=1, base_channels=2, blocks_per_level=1)), seed)
    rng = np.random.default_rng(seed + 1)
    for block in net.blocks():
        block.alpha.data[...] = 0.5  # exercise the residual branch
    inp = rng.normal(size=(1, 5, 8, 8))
    weight = net.parameters()[0]

    # swap the stem for one whose weight is the tensor under test
    def run(w, i):
        original = net.stem
        net.stem = _Bound(original, w)
        try:
            return ad.reduce("mean", ad.square(net.forward(i)))
        finally:
            net.stem = original

    return run, [weight.data.copy(), inp]


class _Bound:
    def __init__(self, conv, weight):
        self.conv, self.weight = conv, weight

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.conv.bias, self.conv.stride)


def brute_metrics(d, z, tau=metrics.TAU, eps=metrics.EPSILON):
    """Loop-based reference metrics over all GT-valid pixels and all pairs."""
    coords = [(i, j) for i in range(z.shape[0]) for j in range(z.shape[1]) if z.valid[i, j]]
    dv = [float(d[i, j]) for i, j in coords]
    zv = [float(z.values[i, j]) for i, j in coords]
    n = len(coords)

    def label(p, q):
        r = max(p, 1e-6) / max(q, 1e-6)
        return 1 if r >= 1 + tau else (-1 if r <= 1 / (1 + tau) else 0)

    wrong = total = 0
    for i, j in itertools.combinations(range(n), 2):
        total += 1
        wrong += label(dv[i], dv[j]) != label(zv[i], zv[j])

    def std(vals):
        m = sum(vals) / len(vals)
        s = sum(abs(v - m) for v in vals) / len(vals)
        return [(v - m) / (s + eps) for v in vals]

    sd, sz = std(dv), std(zv)
    return {
        "oe": wrong / total,
        "srmse": (sum((p - q) ** 2 for p, q in zip(sd, sz)) / n) ** 0.5,
        "rmse": (sum((p - q) ** 2 for p, q in zip(dv, zv)) / n) ** 0.5,
        "abs_rel": sum(abs(p - q) / q for p, q in zip(dv, zv) if q > 1e-6)
        / sum(1 for q in zv if q > 1e-6),
    }


def run(seed=0, report=print):
    """Run every check; returns True when all pass."""
    ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name, fn, arrays in gradient_cases(seed):
            err = ad.check_gradients(fn, arrays)
            passed = err <= GRAD_TOL
            ok &= passed
            report(f"{'PASS' if passed else 'FAIL'} grad {name:24s} rel={err:.2e}")
        fn, arrays = toy_net_case(seed)
        # a smaller step keeps central differences from straddling ReLU kinks
        err = ad.check_gradients(fn, arrays, h=NET_FD_STEP, max_entries=40)
        passed = err <= NET_GRAD_TOL
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'} grad {'toy_unet':24s} rel={err:.2e}")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        z = _field(rng, (8, 8))
        d = rng.uniform(0.5, 5.0, (8, 8))
        ref = brute_metrics(d, z)
        got = metrics.evaluate_metrics(d, z)
        worst = max(worst, *(abs(getattr(got, k) - v) for k, v in ref.items()))
    passed = worst <= METRIC_TOL
    ok &= passed
    report(f"{'PASS' if passed else 'FAIL'} metric oracles            max_err={worst:.2e}")

    # nearest-valid fill of X must get worse as X gets sparser
    scenes = generate_split(4, seed, size=(32, 32))
    table = evaluate(lambda rgb, x: fill_nearest(x), scenes,
                     EvalConfig(seed=seed, target_height=32, pair_count=5000))
    rmse = [row["rmse"] for row in table]
    passed = all(a >= b for a, b in zip(rmse, rmse[1:])) and rmse[-1] == 0.0
    ok &= passed
    report(f"{'PASS' if passed else 'FAIL'} fill oracle monotone       rmse={np.round(rmse, 4).tolist()}")
    return bool(ok)
