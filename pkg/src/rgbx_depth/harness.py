"""Training, evaluation and inference for the RGB+X depth network."""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import (AugmentConfig, make_training_sample, prepare_scene, resize_bilinear,
                      resize_nearest, sparsify)
from .checkpoint import load_checkpoint, save_checkpoint
from .fields import DepthField
from .imageio import read_depth, read_ppm, write_pfm
from .losses import LossConfig, loss_g2
from .metrics import DEFAULT_PAIRS, evaluate_metrics
from .optim import AdamWState, cosine_factor, optimizer_step
from .unet import NetConfig, UNet, assemble_input, init_weights

log = logging.getLogger(__name__)

FIG_LEVELS = (0.0, 0.001, 0.01, 0.1, 1.0)
METRICS = ("oe", "srmse", "rmse", "abs_rel")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    max_steps: int = None
    val_levels: tuple = (0.0, 0.01, 1.0)
    val_fraction: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        d = asdict(self)
        d["val_levels"] = list(self.val_levels)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "net" in d:
            d["net"] = NetConfig(**d["net"])
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "val_levels" in d:
            d["val_levels"] = tuple(d["val_levels"])
        return cls(**d)


@dataclass
class EvalConfig:
    sparsity_levels: tuple = FIG_LEVELS
    metrics: tuple = METRICS
    seed: int = 0
    pair_count: int = DEFAULT_PAIRS
    target_height: int = 64
    batch_size: int = 16

    def __post_init__(self):
        levels = np.asarray(self.sparsity_levels, dtype=np.float64)
        if levels.size == 0 or levels.min() < 0 or levels.max() > 1 \
                or np.any(np.diff(levels) <= 0):
            raise ValueError("sparsity levels must lie in [0, 1] and strictly increase")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")


@dataclass
class TrainResult:
    net: UNet
    log: list
    best_epoch: int
    steps: int


def _seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts])


def predict(net, rgbs, xs, batch_size=16):
    """Run the network in inference mode; returns an N x H x W array."""
    out = []
    for start in range(0, len(rgbs), batch_size):
        inp = assemble_input(np.stack(rgbs[start:start + batch_size]),
                             xs[start:start + batch_size])
        out.append(net.forward(ad.Tensor(inp), training=False).data[:, 0])
    return np.concatenate(out)


def batch_loss(pred, gts, xs, loss_config):
    """Mean per-sample loss over a batch prediction of shape N x 1 x H x W."""
    breakdowns = [loss_g2(pred[i, 0], gt, x, loss_config)
                  for i, (gt, x) in enumerate(zip(gts, xs))]
    total = breakdowns[0].loss
    for b in breakdowns[1:]:
        total = total + b.loss
    return total * (1.0 / len(breakdowns)), breakdowns


def train(train_split, val_split, config=None, checkpoint_path=None, log_path=None):
    """Minimize the scale-adaptive loss over on-the-fly augmented samples.

    ``train_split`` / ``val_split`` are lists of (rgb, DepthField) pairs.
    Keeps and returns the parameters with the best mean validation RMSE.
    """
    config = config or TrainConfig()
    if not train_split:
        raise ValueError("training split is empty")
    net = init_weights(UNet(config.net), config.seed)
    params = net.parameters()
    state = AdamWState()
    n = len(train_split)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    val_config = EvalConfig(sparsity_levels=config.val_levels, metrics=("rmse", "srmse"),
                            seed=config.seed, target_height=config.augment.target_height)
    entries = [{"config": config.to_dict(), "total_steps": total_steps}]
    best = (np.inf, 0, _snapshot(net))
    step = 0
    for epoch in range(config.epochs):
        if step >= total_steps:
            break
        order = np.random.default_rng(_seed(config.seed, 0, epoch)).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            if step >= total_steps:
                break
            samples = [make_training_sample(*train_split[i], config.augment,
                                            seed=_seed(config.seed, 1, epoch, i))
                       for i in order[start:start + config.batch_size]]
            inp = assemble_input(np.stack([s.rgb for s in samples]), [s.x for s in samples])
            pred = net.forward(ad.Tensor(inp), training=True)
            loss, _ = batch_loss(pred, [s.gt for s in samples], [s.x for s in samples],
                                 config.loss)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"loss diverged at epoch {epoch}, step {step}: {loss.item()}")
            net.zero_grad()
            loss.backward()
            optimizer_step(params, [p.grad for p in params], state, lr=config.lr,
                           beta1=config.beta1, beta2=config.beta2,
                           weight_decay=config.weight_decay,
                           schedule=cosine_factor(step, total_steps))
            losses.append(loss.item())
            step += 1
        entry = {"epoch": epoch, "steps": step, "train_loss": float(np.mean(losses))}
        if val_split:
            table = evaluate(net, val_split, val_config)
            entry["val_rmse"] = float(np.mean([row["rmse"] for row in table]))
            entry["val_srmse"] = float(np.mean([row["srmse"] for row in table]))
            score = entry["val_rmse"]
        else:
            score = entry["train_loss"]
        if score < best[0]:
            best = (score, epoch, _snapshot(net))
        entries.append(entry)
        log.info("epoch %d step %d loss %.5f val_rmse %s", epoch, step, entry["train_loss"],
                 entry.get("val_rmse"))
    _restore(net, best[2])
    net.zero_grad()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, {"best_epoch": best[1], "steps": step,
                                               "seed": config.seed})
    if log_path is not None:
        with open(log_path, "w") as f:
            for entry in entries:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(net=net, log=entries, best_epoch=best[1], steps=step)


def _snapshot(net):
    return [p.data.copy() for p in net.parameters()] + [b.copy() for b in net.buffers()]


def _restore(net, snap):
    for dst, src in zip([p.data for p in net.parameters()] + net.buffers(), snap):
        dst[...] = src


def fill_nearest(x, default=0.0):
    """Copy-through predictor: each pixel takes the nearest valid X value."""
    from scipy import ndimage

    if not x.valid.any():
        return np.full(x.shape, default)
    _, (iy, ix) = ndimage.distance_transform_edt(~x.valid, return_indices=True)
    return x.values[iy, ix]


def _as_predictor(model, batch_size):
    if isinstance(model, str):
        model, _ = load_checkpoint(model)
    if isinstance(model, UNet):
        net = model
        return lambda rgbs, xs: predict(net, rgbs, xs, batch_size)
    if callable(model):
        return lambda rgbs, xs: np.stack([model(r, x) for r, x in zip(rgbs, xs)])
    raise TypeError("model must be a checkpoint path, a UNet or a callable(rgb, x)")


def evaluate(model, test_split, config=None):
    """Metric table over sparsity levels; one row per level, in configured order.

    ``model`` is a checkpoint path, a UNet, or a callable ``(rgb, x) -> depth``.
    X is regenerated at each level by noise-free sparsification of the GT.
    Metrics are averaged over scenes, with predictions clamped at 0.
    """
    config = config or EvalConfig()
    run = _as_predictor(model, config.batch_size)
    scenes = [prepare_scene(rgb, z, config.target_height) for rgb, z in test_split]
    rgbs = [s[0] for s in scenes]
    gts = [s[1] for s in scenes]
    table = []
    for li, level in enumerate(config.sparsity_levels):
        xs = [sparsify(gt, level, _seed(config.seed, 2, li, i)) for i, gt in enumerate(gts)]
        preds = np.maximum(run(rgbs, xs), 0.0)
        reports = [evaluate_metrics(p, gt, config.pair_count, _seed(config.seed, 3, li, i))
                   for i, (p, gt) in enumerate(zip(preds, gts))]
        row = {"sparsity": float(level), "scenes": len(gts),
               "valid_fraction": float(np.mean([x.valid_fraction for x in xs]))}
        for name in config.metrics:
            row[name] = float(np.mean([getattr(r, name) for r in reports]))
        table.append(row)
    return table


def nearest_valid_shape(shape, multiple):
    h, w = shape
    if h < multiple or w < multiple:
        raise ValueError(f"image {h}x{w} is smaller than the minimum {multiple}x{multiple}")
    return (max(multiple, int(round(h / multiple)) * multiple),
            max(multiple, int(round(w / multiple)) * multiple))


def infer_arrays(net, rgb, x=None):
    """Predict depth at the input resolution; X in any positive unit."""
    h, w = rgb.shape[:2]
    if x is not None and x.shape != (h, w):
        raise ValueError(f"X {x.shape} does not match RGB {(h, w)}")
    scale = 1.0
    if x is not None and x.valid.any():
        scale = float(x.values[x.valid].max())
        x = DepthField(x.values / scale, x.valid)
    shape = nearest_valid_shape((h, w), net.config.size_multiple)
    rgb_in = resize_bilinear(rgb, shape) if shape != (h, w) else rgb
    if x is None:
        x_in = DepthField.empty(shape)
    elif shape != (h, w):
        x_in = DepthField(resize_nearest(x.values, shape), resize_nearest(x.valid, shape))
    else:
        x_in = x
    pred = predict(net, [rgb_in], [x_in])[0]
    if shape != (h, w):
        pred = resize_nearest(pred, (h, w))
    return pred * scale


def infer(checkpoint, rgb_path, x_path=None, out_path=None):
    """Read RGB (PPM) and optional X (PFM), write predicted depth (PFM)."""
    net, _ = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else (checkpoint, None)
    rgb = read_ppm(rgb_path)
    x = read_depth(x_path) if x_path is not None else None
    pred = infer_arrays(net, rgb, x)
    if out_path is not None:
        write_pfm(out_path, pred)
    return pred


def copy_config(config):
    return copy.deepcopy(config)
