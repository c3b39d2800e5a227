"""ConnNet-mini: conv backbone -> optional non-local block -> dilated fusion head -> upsampling.

The network emits raw logits, ``(N, C, H, W)`` for the connectivity head or
``(N, 1, H, W)`` for the plain segmentation head; callers apply the sigmoid.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .grid import Pattern
from .tensor import Tensor

BACKBONE_STRIDES = (1, 2, 1, 2)
WIDE_FUSION_RATES = (6, 12, 18, 24)


@dataclass
class PredictorConfig:
    head: str = "connectivity"
    pattern: str = "n8"
    widths: tuple[int, ...] = (16, 32, 32, 64)
    use_nonlocal: bool = True
    nonlocal_after: int = 3
    fusion_rates: tuple[int, ...] = (1, 2, 4, 6)
    fusion_width: int = 32
    reduce_width: int | None = None
    upsample: str = "transposed_conv"
    input_size: int = 64

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.fusion_rates = tuple(int(r) for r in self.fusion_rates)
        if self.head not in ("connectivity", "segmentation"):
            raise ValueError(f"head must be 'connectivity' or 'segmentation', got {self.head!r}")
        Pattern.parse(self.pattern)
        if len(self.widths) != len(BACKBONE_STRIDES) or min(self.widths) < 1:
            raise ValueError(f"widths must list {len(BACKBONE_STRIDES)} positive channel counts")
        if not 1 <= self.nonlocal_after <= len(self.widths):
            raise ValueError("nonlocal_after must name a backbone block (1-based)")
        if not self.fusion_rates or min(self.fusion_rates) < 1:
            raise ValueError("fusion_rates needs at least one dilation >= 1")
        if self.upsample not in ("transposed_conv", "bilinear"):
            raise ValueError(f"upsample must be 'transposed_conv' or 'bilinear', got {self.upsample!r}")

    @property
    def pattern_kind(self) -> Pattern:
        return Pattern.parse(self.pattern)

    @property
    def out_channels(self) -> int:
        return self.pattern_kind.channels if self.head == "connectivity" else 1

    @property
    def mid_width(self) -> int:
        return self.reduce_width or 4 * self.out_channels

    @property
    def total_stride(self) -> int:
        return math.prod(BACKBONE_STRIDES)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["fusion_rates"] = list(self.fusion_rates)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PredictorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelError(ValueError):
    pass


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def bilinear_kernel(channels: int, k: int, dtype) -> np.ndarray:
    """Transposed-conv weights that perform per-channel bilinear upsampling."""
    f = (k + 1) // 2
    centre = f - 1 if k % 2 == 1 else f - 0.5
    og = np.arange(k)
    filt1 = 1 - np.abs(og - centre) / f
    w = np.zeros((channels, channels, k, k), dtype)
    for c in range(channels):
        w[c, c] = np.outer(filt1, filt1)
    return w


def init_params(config: PredictorConfig, seed: int = 0, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    rng = np.random.default_rng(seed)
    p: OrderedDict[str, np.ndarray] = OrderedDict()
    cin = 3
    for i, cout in enumerate(config.widths):
        p[f"backbone.{i}.weight"] = _he(rng, (cout, cin, 3, 3), cin * 9, dtype)
        p[f"backbone.{i}.bias"] = np.zeros(cout, dtype)
        cin = cout
        if config.use_nonlocal and i + 1 == config.nonlocal_after:
            d = cout
            di = max(d // 2, 1)
            for name in ("theta", "phi", "g"):
                p[f"nonlocal.{name}"] = (rng.standard_normal((di, d, 1, 1)) / math.sqrt(d)).astype(dtype)
            # zero output projection: the block starts as the identity
            p["nonlocal.z"] = np.zeros((d, di, 1, 1), dtype)
    c, mid, fw = config.out_channels, config.mid_width, config.fusion_width
    for r in config.fusion_rates:
        p[f"head.r{r}.atrous.weight"] = _he(rng, (fw, cin, 3, 3), cin * 9, dtype)
        p[f"head.r{r}.atrous.bias"] = np.zeros(fw, dtype)
        p[f"head.r{r}.reduce.weight"] = _he(rng, (mid, fw, 1, 1), fw, dtype)
        p[f"head.r{r}.reduce.bias"] = np.zeros(mid, dtype)
        p[f"head.r{r}.out.weight"] = (rng.standard_normal((c, mid, 1, 1)) / math.sqrt(mid)).astype(dtype)
        p[f"head.r{r}.out.bias"] = np.zeros(c, dtype)
    if config.upsample == "transposed_conv":
        for i in range(int(math.log2(config.total_stride))):
            p[f"up.{i}.weight"] = bilinear_kernel(c, 4, dtype)
            p[f"up.{i}.bias"] = np.zeros(c, dtype)
    return p


def nonlocal_forward(x: Tensor, theta: Tensor, phi: Tensor, g: Tensor, wz: Tensor,
                     return_parts: bool = False):
    """Embedded-Gaussian non-local block with a residual connection.

    ``theta``, ``phi`` and ``g`` are 1x1 kernels ``(d_inner, d, 1, 1)``; ``wz``
    maps back ``(d, d_inner, 1, 1)``. Each output position is ``x_i`` plus a
    projection of the softmax-weighted average of ``g(x_j)`` over all ``j``.
    """
    n, d, h, w = x.shape
    di = theta.shape[0]
    hw = h * w
    q = T.conv2d(x, theta).reshape(n, di, hw).transpose(0, 2, 1)
    k = T.conv2d(x, phi).reshape(n, di, hw)
    v = T.conv2d(x, g).reshape(n, di, hw).transpose(0, 2, 1)
    affinity = q @ k
    if not np.all(np.isfinite(affinity.data)):
        raise ModelError("non-finite affinities in the non-local block")
    attention = T.softmax(affinity, axis=-1)
    y = (attention @ v).transpose(0, 2, 1).reshape(n, di, h, w)
    z = T.conv2d(y, wz) + x
    if return_parts:
        return z, y, attention
    return z


def fusion_head_forward(features: Tensor, branches) -> Tensor:
    """Sum of parallel dilated branches.

    ``branches`` is a sequence of ``(rate, params)`` where params holds the 3x3
    atrous conv and the two 1x1 reductions as ``(weight, bias)`` pairs.
    """
    if not branches:
        raise ModelError("fusion head needs at least one branch")
    total = None
    for rate, (atrous, reduce, out) in branches:
        h = T.relu(T.conv2d(features, *atrous, dilation=rate, padding=rate))
        h = T.relu(T.conv2d(h, *reduce))
        h = T.conv2d(h, *out)
        if total is not None and h.shape != total.shape:
            raise ModelError(f"branch rate {rate} produced {h.shape}, expected {total.shape}")
        total = h if total is None else total + h
    return total


class ConnNetMini:
    def __init__(self, config: PredictorConfig | None = None, params=None, seed: int = 0,
                 dtype=np.float32):
        self.config = config or PredictorConfig()
        expected = init_params(self.config, seed, dtype or np.float32)
        if params is None:
            params = expected
        else:
            _check_params(expected, params)
        self.params: OrderedDict[str, Tensor] = OrderedDict(
            (name, Tensor(np.array(v, dtype=dtype), requires_grad=True))
            for name, v in params.items()
        )

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        _check_params(self.state_dict(), state)
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> "ConnNetMini":
        return ConnNetMini(self.config, self.state_dict(), dtype=dtype)

    def _p(self, name):
        return self.params[name]

    def backbone(self, x: Tensor) -> Tensor:
        cfg = self.config
        h = x
        for i, stride in enumerate(BACKBONE_STRIDES):
            h = T.relu(T.conv2d(h, self._p(f"backbone.{i}.weight"), self._p(f"backbone.{i}.bias"),
                                stride=stride, padding=1))
            if cfg.use_nonlocal and i + 1 == cfg.nonlocal_after:
                h = nonlocal_forward(h, *(self._p(f"nonlocal.{n}") for n in ("theta", "phi", "g", "z")))
        return h

    def head(self, features: Tensor) -> Tensor:
        branches = []
        for r in self.config.fusion_rates:
            pair = lambda part: (self._p(f"head.r{r}.{part}.weight"), self._p(f"head.r{r}.{part}.bias"))
            branches.append((r, (pair("atrous"), pair("reduce"), pair("out"))))
        return fusion_head_forward(features, branches)

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ModelError(f"expected images shaped (N, 3, H, W), got {x.shape}")
        size = x.shape[2:]
        h = self.head(self.backbone(x - 0.5))
        if self.config.upsample == "transposed_conv":
            i = 0
            while f"up.{i}.weight" in self.params:
                h = T.conv_transpose2d(h, self._p(f"up.{i}.weight"), self._p(f"up.{i}.bias"),
                                       stride=2, padding=1)
                i += 1
        if h.shape[2:] != size:
            h = T.bilinear_resize(h, size)
        return h

    __call__ = forward

    def predict(self, images) -> np.ndarray:
        """Logits for a batch of ``(N, 3, H, W)`` images in [0, 1], without recording a graph."""
        with T.no_grad():
            return self.forward(images).data


def predict(images, config: PredictorConfig, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    return ConnNetMini(config, weights, dtype=None).predict(images)


def _check_params(expected: Mapping[str, np.ndarray], got: Mapping[str, np.ndarray]):
    missing = [k for k in expected if k not in got]
    extra = [k for k in got if k not in expected]
    if missing or extra:
        raise ModelError(f"weights do not match config (missing {missing}, unexpected {extra})")
    for k, v in expected.items():
        if tuple(np.shape(got[k])) != v.shape:
            raise ModelError(f"weight {k}: shape {np.shape(got[k])}, config expects {v.shape}")
