"""Central-difference verification of the autodiff rules.

For every entry of every parameter the analytic gradient is compared with
``(f(x + eps) - f(x - eps)) / (2 eps)``. The gated figure is, per parameter
tensor, ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`` with
``|.|`` the Euclidean norm over the tensor; the largest entry-wise ratio is
reported alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

FLOOR = 1e-12
DEFAULT_KINK_MARGIN = 1e-3


class NonFiniteError(ValueError):
    pass


class KinkError(ValueError):
    """A ReLU input sits so close to 0 that the difference stencil may straddle the kink."""


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")


def _rel(a, n) -> float:
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), FLOOR))


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    max_rel_error_elementwise: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0


def grad_check_report(fn: Callable[[], Tensor], params, eps: float = 1e-5,
                      sample: int | None = None, rng: np.random.Generator | None = None,
                      kink_margin: float | None = None) -> GradCheckReport:
    """Compare backprop with central differences.

    ``fn`` must rebuild the graph from the parameters on every call and return
    a scalar. ``params`` is a list of tensors or a name -> tensor mapping.
    ``sample`` limits how many entries per tensor are differenced. With
    ``kink_margin`` set, a ``KinkError`` is raised when any ReLU input at the
    base point lies within that distance of zero.
    """
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.requires_grad = True
        p.zero_grad()
    with T.watch_relu_inputs() as margins:
        out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    _finite(out.data, "output")
    if kink_margin is not None and margins and min(margins) < kink_margin:
        raise KinkError(f"ReLU input {min(margins):.2e} within {kink_margin:.0e} of the kink")
    report = GradCheckReport()
    if not out.requires_grad:
        return report
    out.backward()
    for name, p in named.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        _finite(analytic, "analytic gradient")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, sample, replace=False)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * eps)
        _finite(numeric, "numeric gradient")
        a = analytic[idx]
        elementwise = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), FLOOR)
        err = _rel(a, numeric)
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
        if elementwise.size:
            report.max_rel_error_elementwise = max(report.max_rel_error_elementwise,
                                                   float(elementwise.max()))
        report.checked_entries += len(idx)
    return report


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest per-tensor relative error between backprop and central differences."""
    return grad_check_report(fn, list(params), eps, sample, rng).max_rel_error


def projected(fn: Callable[[], Tensor], shape, seed: int = 0) -> Callable[[], Tensor]:
    """Turn a tensor-valued graph into a scalar one with a fixed random projection."""
    r = np.random.default_rng(seed).standard_normal(shape)
    return lambda: (fn() * r).sum()


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One small double-precision graph per differentiable op."""
    rng = np.random.default_rng(seed)
    cases = {}

    def case(name, fn, params, shape):
        cases[name] = (projected(fn, shape, seed=len(cases)), params)

    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    case("add", lambda: a + b, [a, b], (3, 4))
    case("mul", lambda: a * b, [a, b], (3, 4))
    case("scale", lambda: a * 2.5, [a], (3, 4))
    case("sigmoid", lambda: T.sigmoid(a * 3.0), [a], (3, 4))
    case("exp", lambda: T.exp(a), [a], (3, 4))
    pos = _rand(rng, 3, 4, lo=0.2, hi=2.0)
    case("log", lambda: T.log(pos), [pos], (3, 4))
    m1, m2 = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)
    case("matmul", lambda: m1 @ m2, [m1, m2], (2, 3, 5))
    s = _rand(rng, 2, 3, 6, lo=-2, hi=2)
    case("softmax", lambda: T.softmax(s, axis=-1), [s], (2, 3, 6))
    case("sum", lambda: a.sum(axis=1), [a], (3,))
    case("mean", lambda: a.mean(axis=0), [a], (4,))
    case("reshape_transpose", lambda: a.reshape(2, 6).transpose(1, 0), [a], (6, 2))
    r = Tensor(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)), requires_grad=True)
    case("relu", lambda: T.relu(r), [r], (3, 4))

    x = _rand(rng, 2, 3, 8, 8)
    k = _rand(rng, 4, 3, 3, 3)
    bias = _rand(rng, 4)
    case("conv2d", lambda: T.conv2d(x, k, bias, padding=1), [x, k, bias], (2, 4, 8, 8))
    case("conv2d_stride2", lambda: T.conv2d(x, k, bias, stride=2, padding=1), [x, k, bias], (2, 4, 4, 4))
    case("conv2d_dilated", lambda: T.conv2d(x, k, bias, dilation=2, padding=2), [x, k, bias], (2, 4, 8, 8))
    kt = _rand(rng, 3, 2, 4, 4)
    bt = _rand(rng, 2)
    xs = _rand(rng, 1, 3, 4, 4)
    case("conv_transpose2d", lambda: T.conv_transpose2d(xs, kt, bt, stride=2, padding=1),
         [xs, kt, bt], (1, 2, 8, 8))
    case("bilinear_up", lambda: T.bilinear_resize(xs, (7, 9)), [xs], (1, 3, 7, 9))
    case("bilinear_down", lambda: T.bilinear_resize(x, (5, 3)), [x], (2, 3, 5, 3))
    z = _rand(rng, 2, 8, 4, 4, lo=-3, hi=3)
    y = (rng.random((2, 8, 4, 4)) < 0.5).astype(np.float64)
    cases["bce_with_logits"] = (lambda: T.bce_with_logits(z, y), [z])
    return cases


def check_ops(eps: float = 1e-5, seed: int = 0) -> dict[str, GradCheckReport]:
    return {name: grad_check_report(fn, params, eps) for name, (fn, params) in op_cases(seed).items()}


def network_case(config, seed: int = 0, size: int = 8, jitter: float = 0.1):
    """Double-precision ConnNet-mini with every weight (including zero-initialised ones) perturbed."""
    from .model import ConnNetMini

    model = ConnNetMini(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 7919)
    for p in model.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * jitter
    x = Tensor(rng.random((1, 3, size, size)), requires_grad=True)
    fn = projected(lambda: model(x), (1, config.out_channels, size, size), seed=seed)
    params = {"input": x, **model.params}
    return fn, params


def check_network(config, seed: int = 0, eps: float = 1e-5, sample: int | None = None,
                  kink_margin: float = DEFAULT_KINK_MARGIN, max_draws: int = 50):
    """Grad-check the whole network at the first drawn point clear of ReLU kinks.

    Returns ``(report, seed_used)``.
    """
    for draw in range(max_draws):
        fn, params = network_case(config, seed + draw)
        try:
            return grad_check_report(fn, params, eps, sample,
                                     np.random.default_rng(seed), kink_margin), seed + draw
        except KinkError:
            continue
    raise KinkError(f"no kink-free test point in {max_draws} draws")
