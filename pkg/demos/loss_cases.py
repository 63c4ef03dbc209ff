"""Walk through the scale-adaptive loss on a single 16x16 depth field.

Run with ``python demos/loss_cases.py``. Prints how the loss reacts to
scaled and shifted predictions, and how gradient descent on the
prediction itself behaves when X holds many, one, or zero valid values.
"""

import warnings

import numpy as np

from rgbx_depth import autodiff as ad
from rgbx_depth import losses as L
from rgbx_depth.fields import DepthField
from rgbx_depth.optim import AdamWState, cosine_factor, optimizer_step

warnings.simplefilter("ignore", RuntimeWarning)  # 16x16 supports only 3 gradient scales
rng = np.random.default_rng(0)
yy, xx = np.mgrid[0:16, 0:16] / 15.0
z = DepthField.dense(0.2 + 0.5 * yy + 0.2 * np.sin(3 * xx) + 0.1 * rng.random((16, 16)))

# %% The relative term ignores scale and shift; the absolute term does not.
sparse_x = DepthField(z.values, rng.random((16, 16)) < 0.2)
for s, f in [(1.0, 0.0), (2.0, 0.0), (1.0, 0.3), (0.5, -0.1)]:
    b = L.loss_g2(s * z.values + f, z, sparse_x)
    rel = L.loss_sa(s * z.values + f, z, DepthField.empty(z.shape)).item()
    print(f"d = {s} z + {f:+}:  relative {rel:.2e}  sa {b.sa_term:.4f}  sg {b.sg_term:.4f}")

# %% The number of distinct valid X values decides what the loss can pin down.
anchor = np.zeros((16, 16), bool)
anchor[5, 7] = True
inputs = {"many points": sparse_x, "one point": DepthField(z.values, anchor),
          "no points": DepthField.empty(z.shape)}


def descend(x, steps=3000, lr=0.05):
    d = ad.Tensor(0.5 + 0.01 * rng.normal(size=z.shape), requires_grad=True)
    state = AdamWState()
    for k in range(steps):
        d.grad = None
        L.loss_g2(d, z, x).loss.backward()
        optimizer_step([d], [d.grad], state, lr=lr, weight_decay=0.0,
                       schedule=cosine_factor(k, steps))
    return d.data


design = np.c_[z.values.ravel(), np.ones(256)]
for name, x in inputs.items():
    case, m_v, m_dv = L.regression_case(x)
    d = descend(x)
    (a, b), *_ = np.linalg.lstsq(design, d.ravel(), rcond=None)
    print(f"{name:12s} case {case.value:7s} M_V={m_v:3d} M_dv={m_dv:3d}  "
          f"max|d - z| {np.abs(d - z.values).max():.3f}  best affine fit a={a:.3f} b={b:+.3f}")
# With many points the fit is a=1, b=0. One point fixes d at that pixel only,
# so the scale is free. With no points both scale and shift are free.
