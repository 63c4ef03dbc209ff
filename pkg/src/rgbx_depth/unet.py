"""U-Net with ReZero residual blocks (and a batch-norm block for ablations).

Layout for ``levels = L`` and base width ``C``::

    stem: 3x3 conv in_channels -> C, ReLU
    encoder level l = 0..L-1: blocks at width C*2^l, keep skip,
                              3x3 stride-2 conv C*2^l -> C*2^(l+1)
    bottleneck: blocks at width C*2^L
    decoder level l = L-1..0: nearest x2 upsample, concat skip,
                              3x3 conv 3*C*2^l -> C*2^l, blocks
    head: ReLU, 3x3 conv C -> out_channels (linear output)
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import DepthField

BLOCK_KINDS = ("rezero", "bn")


@dataclass
class NetConfig:
    levels: int = 4
    base_channels: int = 16
    blocks_per_level: int = 2
    block_kind: str = "rezero"
    in_channels: int = 5
    out_channels: int = 1

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")
        if self.levels < 1 or self.base_channels < 1 or self.blocks_per_level < 0:
            raise ValueError("levels, base_channels must be >= 1 and blocks_per_level >= 0")

    @classmethod
    def full_scale(cls):
        # about 19.6M parameters, close to the 18M target size
        return cls(levels=4, base_channels=32, blocks_per_level=2)

    def to_dict(self):
        return asdict(self)

    @property
    def size_multiple(self):
        return 2 ** self.levels


class Conv2d:
    def __init__(self, cin, cout, k=3, stride=1):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride)

    def parameters(self):
        return [self.weight, self.bias]

    def init(self, rng):
        fan_in = self.cin * self.k * self.k
        self.weight.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.weight.shape)
        self.bias.data[...] = 0.0


class ReZeroBlock:
    """x + alpha * conv(relu(conv(relu(x)))), alpha starting at 0."""

    def __init__(self, channels):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels)
        self.conv2 = Conv2d(channels, channels)
        self.alpha = Tensor(np.zeros(()), requires_grad=True)

    def residual(self, x):
        return self.conv2(ad.relu(self.conv1(ad.relu(x))))

    def __call__(self, x, training=True):
        if x.shape[1] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {x.shape[1]}")
        return x + self.alpha * self.residual(x)

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters() + [self.alpha]

    def buffers(self):
        return []

    def init(self, rng):
        self.conv1.init(rng)
        self.conv2.init(rng)
        self.alpha.data[...] = 0.0


class BatchNorm2d:
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x, training=True):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=training, momentum=self.momentum, eps=self.eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def init(self, rng):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0


class BNBlock:
    """Pre-activation residual block: x + conv(relu(bn(conv(relu(bn(x))))))."""

    def __init__(self, channels):
        self.channels = channels
        self.bn1 = BatchNorm2d(channels)
        self.conv1 = Conv2d(channels, channels)
        self.bn2 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels)

    def __call__(self, x, training=True):
        if x.shape[1] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {x.shape[1]}")
        h = self.conv1(ad.relu(self.bn1(x, training)))
        h = self.conv2(ad.relu(self.bn2(h, training)))
        return x + h

    def parameters(self):
        return (self.bn1.parameters() + self.conv1.parameters()
                + self.bn2.parameters() + self.conv2.parameters())

    def buffers(self):
        return self.bn1.buffers() + self.bn2.buffers()

    def init(self, rng):
        for part in (self.bn1, self.conv1, self.bn2, self.conv2):
            part.init(rng)


class UNet:
    def __init__(self, config=None, seed=None):
        self.config = config = config or NetConfig()
        block = ReZeroBlock if config.block_kind == "rezero" else BNBlock
        widths = [config.base_channels * 2 ** level for level in range(config.levels + 1)]
        nb = config.blocks_per_level
        self.widths = widths
        self.stem = Conv2d(config.in_channels, widths[0])
        self.enc_blocks = [[block(widths[l]) for _ in range(nb)] for l in range(config.levels)]
        self.downs = [Conv2d(widths[l], widths[l + 1], stride=2) for l in range(config.levels)]
        self.mid_blocks = [block(widths[-1]) for _ in range(nb)]
        self.reduces = [Conv2d(widths[l + 1] + widths[l], widths[l])
                        for l in reversed(range(config.levels))]
        self.dec_blocks = [[block(widths[l]) for _ in range(nb)]
                           for l in reversed(range(config.levels))]
        self.head = Conv2d(widths[0], config.out_channels)
        if seed is not None:
            init_weights(self, seed)

    def modules(self):
        """Layers in declaration order."""
        mods = [self.stem]
        for blocks, down in zip(self.enc_blocks, self.downs):
            mods += blocks + [down]
        mods += self.mid_blocks
        for reduce, blocks in zip(self.reduces, self.dec_blocks):
            mods += [reduce] + blocks
        mods.append(self.head)
        return mods

    def parameters(self):
        return [p for m in self.modules() for p in m.parameters()]

    def buffers(self):
        return [b for m in self.modules() if hasattr(m, "buffers") for b in m.buffers()]

    def blocks(self):
        return [m for m in self.modules() if isinstance(m, (ReZeroBlock, BNBlock))]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self):
        """Closed-form parameter count; must agree with ``len`` of the flat state."""
        cfg, w = self.config, self.widths

        def conv(cin, cout):
            return cout * cin * 9 + cout

        per_block = (lambda c: 2 * conv(c, c) + 1) if cfg.block_kind == "rezero" \
            else (lambda c: 2 * conv(c, c) + 4 * c)
        total = conv(cfg.in_channels, w[0]) + conv(w[0], cfg.out_channels)
        for l in range(cfg.levels):
            total += 2 * cfg.blocks_per_level * per_block(w[l])
            total += conv(w[l], w[l + 1]) + conv(w[l + 1] + w[l], w[l])
        total += cfg.blocks_per_level * per_block(w[-1])
        return total

    def forward(self, inp, training=True):
        inp = ad.as_tensor(inp)
        m = self.config.size_multiple
        if inp.shape[2] % m or inp.shape[3] % m:
            raise ValueError(f"spatial size {inp.shape[2:]} not divisible by {m}")
        h = ad.relu(self.stem(inp))
        skips = []
        for blocks, down in zip(self.enc_blocks, self.downs):
            for b in blocks:
                h = b(h, training)
            skips.append(h)
            h = down(h)
        for b in self.mid_blocks:
            h = b(h, training)
        for reduce, blocks, skip in zip(self.reduces, self.dec_blocks, reversed(skips)):
            h = reduce(ad.concat_channels(ad.nearest_upsample2(h), skip))
            for b in blocks:
                h = b(h, training)
        return self.head(ad.relu(h))

    __call__ = forward


def init_weights(net, seed):
    """He-normal conv weights, zero biases, alpha = 0, identity batch norm."""
    rng = np.random.default_rng(seed)
    for m in net.modules():
        m.init(rng)
    return net


def assemble_input(rgb, x):
    """Stack RGB, zero-filled X values and the X mask into an N x 5 x H x W array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 3:
        rgb, x = rgb[None], [x]
    xs = [xi if xi is not None else DepthField.empty(rgb.shape[1:3]) for xi in x]
    values = np.stack([xi.values for xi in xs])[:, None]
    masks = np.stack([xi.valid for xi in xs]).astype(np.float64)[:, None]
    return np.concatenate([rgb.transpose(0, 3, 1, 2), values, masks], axis=1)


def unet_forward(rgb, x, net, training=True):
    """Predict depth from RGB (H x W x 3 or N x H x W x 3) and optional X field(s).

    Returns an N x 1 x H x W Tensor.
    """
    return net.forward(Tensor(assemble_input(rgb, x)), training=training)


def rezero_block_forward(x, block):
    return block(ad.as_tensor(x))


def bn_block_forward(x, block, training=True):
    return block(ad.as_tensor(x), training)
