"""Shared-encoder registration network with subtraction merge.

Both volumes of a pair go through the same encoder. Their feature pyramids
are subtracted level by level, and one decoder turns the difference into
raw increment maps. Decoding the negated difference gives the reverse
direction, so a single forward pass yields both transformations.

The decoder has no additive terms (no biases, no norm shift), so a zero
difference pyramid always decodes to zero raw maps, i.e. the identity field.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .volume_io import Volume

# full-size encoder widths; NetConfig defaults to a CPU-sized network
FULL_CHANNELS = (64, 128, 256, 512)


@dataclass
class NetConfig:
    channels: tuple = (8, 16, 16, 16)
    in_channels: int = 1
    ds_levels: int = 3
    leaky_slope: float = 0.2
    eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ValueError("need at least two encoder blocks")
        if min(self.channels) <= 0 or self.in_channels <= 0:
            raise ValueError("channel counts must be positive")
        if not 1 <= self.ds_levels <= len(self.channels):
            raise ValueError(f"ds_levels must lie in [1, {len(self.channels)}], got {self.ds_levels}")

    @property
    def depth(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _dec_channels(cfg: NetConfig, level: int) -> int:
    # feature width of decoder output at resolution 1/2**level
    return cfg.channels[max(level - 1, 0)] if level < cfg.depth else cfg.channels[-1]


def parameter_shapes(cfg: NetConfig) -> dict:
    shapes = {}
    cin = cfg.in_channels
    for l, c in enumerate(cfg.channels):
        shapes[f"enc{l}.conv.weight"] = (c, cin, 3, 3, 3)
        shapes[f"enc{l}.conv.bias"] = (c,)
        shapes[f"enc{l}.down.weight"] = (c, c, 2, 2, 2)
        shapes[f"enc{l}.down.bias"] = (c,)
        cin = c
    for l in range(cfg.depth - 1, -1, -1):
        shapes[f"dec{l}.conv.weight"] = (_dec_channels(cfg, l), _dec_channels(cfg, l + 1), 3, 3, 3)
    for s in range(cfg.ds_levels):
        shapes[f"head{s}.weight"] = (3, _dec_channels(cfg, s), 3, 3, 3)
    return shapes


def init_parameters(cfg: NetConfig, seed: int = 0, dtype=np.float32, zero_heads: bool = True) -> dict:
    """Fan-in scaled uniform init; heads start at zero so the first prediction is the identity."""
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1 + cfg.leaky_slope ** 2))
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("bias"):
            arr = np.zeros(shape)
        elif name.startswith("head") and zero_heads:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = gain * math.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(arr.astype(dtype), requires_grad=True)
    return params


def count_parameters(params: dict) -> int:
    return sum(p.data.size for p in params.values())


class RegistrationNet:
    def __init__(self, cfg: NetConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        missing = set(parameter_shapes(cfg)) - set(self.params)
        if missing:
            raise ValueError(f"parameters missing for {sorted(missing)}")

    def _act(self, x):
        return T.leaky_relu(T.instance_norm(x, self.cfg.eps), self.cfg.leaky_slope)

    def check_shape(self, shape):
        f = 2 ** self.cfg.depth
        if any(n % f for n in shape):
            raise ValueError(f"spatial extents {tuple(shape)} must be divisible by {f} for depth {self.cfg.depth}")

    def encode(self, v) -> list:
        """Feature pyramid ``[f_1, ..., f_L]``; ``f_l`` is at ``1/2**l`` resolution."""
        x = T.as_tensor(v.data if isinstance(v, Volume) else v)
        if x.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[0]}")
        self.check_shape(x.shape[1:])
        p = self.params
        feats = []
        for l in range(self.cfg.depth):
            x = self._act(x)
            x = T.conv3d(x, p[f"enc{l}.conv.weight"], p[f"enc{l}.conv.bias"], stride=1, padding=1)
            x = T.conv3d(x, p[f"enc{l}.down.weight"], p[f"enc{l}.down.bias"], stride=2, padding=0)
            feats.append(x)
        return feats

    @staticmethod
    def merge(e_m: list, e_f: list) -> list:
        return [T.sub(a, b) for a, b in zip(e_m, e_f)]

    def decode(self, m: list) -> list:
        """Raw increment maps ``[r_0, ..., r_{S-1}]``, ``r_s`` at ``1/2**s`` resolution."""
        p = self.params
        heads = [None] * self.cfg.ds_levels
        x = m[-1]
        for l in range(self.cfg.depth - 1, -1, -1):
            x = T.conv3d(T.upsample_nearest2x(x), p[f"dec{l}.conv.weight"], None, stride=1, padding=1)
            if l > 0:
                x = T.add(x, m[l - 1])
            x = self._act(x)
            if l < self.cfg.ds_levels:
                heads[l] = T.conv3d(x, p[f"head{l}.weight"], None, stride=1, padding=1)
        return heads

    def symmetric_forward(self, moving, fixed):
        """Raw maps for M->F and F->M; the encoder runs once per volume."""
        mv = moving.data if isinstance(moving, Volume) else T.as_tensor(moving).data
        fx = fixed.data if isinstance(fixed, Volume) else T.as_tensor(fixed).data
        if mv.shape != fx.shape:
            raise ValueError(f"moving {mv.shape} and fixed {fx.shape} shapes differ")
        e_m = self.encode(moving)
        e_f = self.encode(fixed)
        m = self.merge(e_m, e_f)
        raw_mf = self.decode(m)
        raw_fm = self.decode([T.neg(x) for x in m])
        return raw_mf, raw_fm
