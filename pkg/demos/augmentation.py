"""Degrade a synthetic ground-truth map into raw X inputs.

Run with ``python demos/augmentation.py [out_dir]``. Prints what each gated
stage did to a handful of samples and, if ``out_dir`` is given, writes the
samples in the on-disk layout the ``train`` subcommand reads.
"""

import sys

import numpy as np

from rgbx_depth import imageio
from rgbx_depth.augment import AugmentConfig, degrade, make_training_sample, prepare_scene
from rgbx_depth.synthscenes import generate_split

rgb, z = generate_split(1, seed=3)[0]
print(f"scene depth {z.values.min():.2f}..{z.values.max():.2f} m, {z.shape[1]}x{z.shape[0]}")

config = AugmentConfig(target_height=64)
_, gt = prepare_scene(rgb, z, config.target_height)
for seed in range(8):
    x, record = degrade(gt, config, seed)
    stages = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in record.items())
    print(f"seed {seed}: valid {x.valid_fraction:6.1%}  {stages}")

# the same seed always gives the same sample
a = make_training_sample(rgb, z, config, seed=11)
b = make_training_sample(rgb, z, config, seed=11)
print("repeatable:", a.x == b.x and np.array_equal(a.rgb, b.rgb))

if len(sys.argv) > 1:
    for seed in range(8):
        s = make_training_sample(rgb, z, config, seed=seed)
        imageio.write_scene(sys.argv[1], f"sample_{seed:02d}", s.rgb, s.gt, s.x)
    print("wrote 8 samples to", sys.argv[1])
