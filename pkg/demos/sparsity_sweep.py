"""Train a small network briefly and read its error across X densities.

Run with ``python demos/sparsity_sweep.py``; takes under a minute on one core.
A short run is far from the acceptance configuration, so the trend is only
indicative. The nearest-fill baseline needs no training and shows the
expected shape of the curve: more valid X pixels, lower error.
"""

import logging

from rgbx_depth.augment import AugmentConfig
from rgbx_depth.harness import FIG_LEVELS, EvalConfig, TrainConfig, evaluate, fill_nearest, train
from rgbx_depth.synthscenes import generate_split
from rgbx_depth.unet import NetConfig

# noise, blur and holes off: only the X density varies
GATES = ("gaussian", "saltpepper", "blur", "holes")

logging.basicConfig(level=logging.INFO, format="%(message)s")
size = 32
train_split = generate_split(64, seed=0, size=(size, size))
test_split = generate_split(16, seed=2, size=(size, size))
eval_config = EvalConfig(sparsity_levels=FIG_LEVELS, target_height=size)


def show(title, table):
    print(title)
    print("  sparsity   valid     rmse    srmse      oe")
    for row in table:
        print(f"  {row['sparsity']:8.3f} {row['valid_fraction']:7.4f} {row['rmse']:8.4f}"
              f" {row['srmse']:8.4f} {row['oe']:7.4f}")


show("nearest-fill baseline", evaluate(lambda rgb, x: fill_nearest(x), test_split, eval_config))

config = TrainConfig(lr=1e-3, epochs=100, batch_size=4, max_steps=300,
                     net=NetConfig(levels=2, base_channels=8, blocks_per_level=1),
                     augment=AugmentConfig(target_height=size, rate_mode="uniform",
                                           gate_probs=dict.fromkeys(GATES, 0.0)))
result = train(train_split, [], config)
show(f"network after {result.steps} steps", evaluate(result.net, test_split, eval_config))
