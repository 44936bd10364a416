"""Central finite-difference checks of tape gradients.

All checks run in float64. A scalar objective is formed from the checked
function's output (a fixed random projection unless a loss is supplied); its
tape gradient is compared element-wise with central differences. Tensors up to
``full_limit`` elements are probed exhaustively, larger ones at ``probes``
seeded random positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .calib import DCC, DCD, DCU, OFFSET_CHANNELS
from .deform import modulated_deform_conv2d
from .network import VARIANTS, ArchitectureConfig, build_network
from .nn import Module
from .tensor import Tape, Tensor, backward, no_grad, precision

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-8
KINK_MARGIN = 1e-4
MAX_DRAWS = 50


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP, indices=None
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``indices`` (flat positions) only those entries are filled; the rest
    are NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


@dataclass
class TensorCheck:
    name: str
    shape: tuple
    max_rel: float
    max_abs: float
    probes: int
    passed: bool
    worst_index: Optional[tuple] = None
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0

    def line(self) -> str:
        shape = "x".join(str(s) for s in self.shape) or "scalar"
        status = "PASS" if self.passed else "FAIL"
        text = f"{self.name} {shape} {self.max_rel:.3e} {self.max_abs:.3e} {status}"
        if not self.passed:
            text += f"  # at {self.worst_index}: analytic={self.worst_analytic:.10g} numeric={self.worst_numeric:.10g}"
        return text


@dataclass
class GradReport:
    label: str
    tolerance: float
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel(self) -> float:
        return max((c.max_rel for c in self.checks), default=0.0)

    def text(self) -> str:
        return "\n".join(f"{self.label}/{c.line()}" for c in self.checks)


def _probe_indices(size: int, rng: np.random.Generator, full_limit: int, probes: int) -> np.ndarray:
    if size <= full_limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=probes, replace=False))


def check_function(
    fn: Callable[[], Tensor],
    tensors: dict,
    label: str = "fn",
    loss: Optional[Callable[[Tensor], Tensor]] = None,
    tolerance: float = DEFAULT_TOL,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    full_limit: int = 4096,
    probes: int = 64,
) -> GradReport:
    """Compare tape and finite-difference gradients of ``fn`` w.r.t. ``tensors``.

    ``fn`` must build its output from the very ``Tensor`` objects in
    ``tensors`` (they are perturbed in place).
    """
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 tensors; {name} is {t.dtype}")
        t.requires_grad = True
        t.grad = None
        t.data = np.array(t.data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = fn()
    if loss is None:
        proj = rng.standard_normal(out.shape)

        def objective(o):
            return F.sum(F.mul(o, Tensor(proj)))

    else:
        objective = loss
    backward(objective(out))

    def value() -> float:
        with no_grad():
            return float(objective(fn()).data)

    report = GradReport(label=label, tolerance=tolerance)
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        idx = _probe_indices(t.data.size, rng, full_limit, probes)
        flat = t.data.reshape(-1)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[idx]
        err = np.abs(a - numeric)
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
        worst = int(np.argmax(rel)) if len(rel) else 0
        check = TensorCheck(
            name=name,
            shape=tuple(t.shape),
            max_rel=float(rel.max()) if len(rel) else 0.0,
            max_abs=float(err.max()) if len(err) else 0.0,
            probes=len(idx),
            passed=bool(len(rel) == 0 or rel.max() < tolerance),
        )
        if len(rel):
            check.worst_index = tuple(int(v) for v in np.unravel_index(idx[worst], t.shape))
            check.worst_analytic = float(a[worst])
            check.worst_numeric = float(numeric[worst])
        report.checks.append(check)
        t.grad = None
    return report


def check_module(module: Module, inputs: dict, label: str = "module", forward=None, **kw) -> GradReport:
    """Check every parameter of ``module`` and every tensor in ``inputs``.

    ``forward(module, **inputs)`` defaults to ``module(*inputs.values())``.
    """
    tensors = dict(inputs)
    for name, p in module.named_parameters():
        tensors[name] = p
    if forward is None:
        fn = lambda: module(*[inputs[k] for k in inputs])  # noqa: E731
    else:
        fn = lambda: forward(module, **inputs)  # noqa: E731
    return check_function(fn, tensors, label=label, **kw)


def prepare_deformable(module: Module, rng: np.random.Generator) -> None:
    """Move every offset-predicting conv off its zero init so sampling points
    sit at least ~0.1 px away from integer coordinates, where bilinear
    interpolation has kinks."""
    kk2 = OFFSET_CHANNELS * 2 // 3
    for m in module.modules():
        if isinstance(m, (DCD, DCU)):
            conv = m.conv_offset
            w = conv.weight.data
            conv.weight.data = rng.uniform(-1e-3, 1e-3, size=w.shape).astype(w.dtype)
            bias = np.empty(conv.bias.shape, dtype=w.dtype)
            bias[:kk2] = rng.integers(-1, 2, size=kk2) + rng.uniform(0.3, 0.7, size=kk2)
            bias[kk2:] = rng.standard_normal(bias.size - kk2)
            conv.bias.data = bias


def _randomize_norms(module: Module, rng: np.random.Generator) -> None:
    # non-trivial affine values so gamma/beta gradients are exercised generically
    from .nn import InstanceNorm2d

    for m in module.modules():
        if isinstance(m, InstanceNorm2d):
            m.weight.data = 1.0 + 0.2 * rng.standard_normal(m.weight.shape)
            m.bias.data = 0.2 * rng.standard_normal(m.bias.shape)


def _randn(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def _frac_offsets(rng, shape):
    # integer part in {-1, 0, 1}, fractional part in [0.2, 0.8]
    return Tensor(rng.integers(-1, 2, size=shape) + rng.uniform(0.2, 0.8, size=shape), dtype=np.float64)


def primitive_checks(seed: int) -> list:
    rng = np.random.default_rng(seed)
    reports = []

    def add(label, fn, tensors, **kw):
        reports.append(check_function(fn, tensors, label=label, seed=seed, **kw))

    x = _randn(rng, 2, 3, 6, 6)
    w = _randn(rng, 4, 3, 3, 3)
    b = _randn(rng, 4)
    add("conv2d", lambda: F.conv2d(x, w, b, stride=1, padding=1), {"input": x, "weight": w, "bias": b})
    x2 = _randn(rng, 1, 3, 7, 7)
    w2 = _randn(rng, 2, 3, 3, 3)
    add("conv2d_stride2", lambda: F.conv2d(x2, w2, None, stride=2, padding=1), {"input": x2, "weight": w2})
    x3 = _randn(rng, 2, 4, 3, 3)
    w3 = _randn(rng, 4, 2, 2, 2)
    b3 = _randn(rng, 2)
    add("conv_transpose2d", lambda: F.conv_transpose2d(x3, w3, b3), {"input": x3, "weight": w3, "bias": b3})
    x4 = _randn(rng, 2, 3, 6, 7)
    add("avg_pool2d_k2", lambda: F.avg_pool2d(x4, 2, 2), {"input": x4})
    add("avg_pool2d_k4_ragged", lambda: F.avg_pool2d(x4, 4, 4), {"input": x4})
    x5 = _randn(rng, 2, 3, 6, 6)
    add("max_pool2d", lambda: F.max_pool2d(x5, 2), {"input": x5})
    add("global_avg_pool", lambda: F.adaptive_avg_pool_global(x4), {"input": x4})
    x6 = _randn(rng, 1, 2, 2, 3)
    add("nearest_upsample", lambda: F.nearest_upsample(x6, 4, size=(7, 10)), {"input": x6})
    xl = _randn(rng, 3, 5)
    wl = _randn(rng, 4, 5)
    bl = _randn(rng, 4)
    add("linear", lambda: F.linear(xl, wl, bl), {"input": xl, "weight": wl, "bias": bl})
    a = _randn(rng, 2, 3, 4, 4)
    c = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)), dtype=np.float64)
    g = _randn(rng, 2, 3, 1, 1)
    add("sigmoid", lambda: F.sigmoid(a), {"input": a})
    add("exp", lambda: F.exp(a), {"input": a})
    # keep leaky-relu inputs away from the kink at 0
    lr_in = Tensor(np.where(a.data >= 0, a.data + 0.1, a.data - 0.1), dtype=np.float64)
    add("leaky_relu", lambda: F.leaky_relu(lr_in, 0.01), {"input": lr_in})
    add("add", lambda: F.add(a, c), {"a": a, "b": c})
    add("mul_broadcast", lambda: F.mul(g, a), {"gate": g, "x": a})
    add("div", lambda: F.div(a, c, floor=1e-8), {"num": a, "den": c})
    add("concat_channels", lambda: F.concat_channels([a, c]), {"a": a, "b": c})
    gam = _randn(rng, 3)
    bet = _randn(rng, 3)
    add("instance_norm", lambda: F.instance_norm(a, gam, bet), {"input": a, "weight": gam, "bias": bet})
    add("softmax", lambda: F.softmax(a, axis=1), {"input": a})
    add("log_softmax", lambda: F.log_softmax(a, axis=1), {"input": a})

    xd = _randn(rng, 2, 3, 5, 6)
    wd = _randn(rng, 4, 3, 3, 3)
    bd = _randn(rng, 4)
    off = _frac_offsets(rng, (2, 18, 5, 6))
    mk = _randn(rng, 2, 9, 5, 6)
    add(
        "modulated_deform_conv2d",
        lambda: modulated_deform_conv2d(xd, wd, bd, off, mk),
        {"input": xd, "weight": wd, "bias": bd, "offsets": off, "mask": mk},
    )
    return reports


def _kink_safe(seed: int, build):
    """Call ``build(rng)`` with successive draws until the module output is at
    least ``KINK_MARGIN`` away from every kink. Returns ``(module, inputs)``."""
    for draw in range(MAX_DRAWS):
        module, inputs = build(np.random.default_rng([seed, draw]))
        if kink_margin(module(*inputs.values())) >= KINK_MARGIN:
            break
    return module, inputs


def layer_checks(seed: int) -> list:
    def dcc(rng):
        m = DCC(3, 4, rng)
        _randomize_norms(m, rng)
        return m, {"x": _randn(rng, 2, 3, 8, 6)}

    def dcd(rng):
        m = DCD(3, rng)
        prepare_deformable(m, rng)
        return m, {"f": _randn(rng, 2, 3, 6, 8)}

    def dcu(rng):
        m = DCU(4, 2, rng)
        prepare_deformable(m, rng)
        return m, {"f_up_src": _randn(rng, 2, 4, 3, 4), "skip": _randn(rng, 2, 2, 6, 8)}

    reports = []
    with precision(np.float64):
        for label, build in (("dcc", dcc), ("dcd", dcd), ("dcu", dcu)):
            module, inputs = _kink_safe(seed, build)
            reports.append(check_module(module, inputs, label=label, seed=seed))
    return reports


def kink_margin(out: Tensor) -> float:
    """Distance of the evaluation point from the nearest non-differentiable
    point of any leaky ReLU (input at 0) or max pool (tied window maximum)
    in the graph that produced ``out``."""
    margin = np.inf
    for node in Tape.from_output(out).nodes:
        if node._op == "leaky_relu":
            margin = min(margin, float(np.abs(node._parents[0].data).min()))
        elif node._op == "max_pool2d":
            x = node._parents[0].data
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top = np.sort(win, axis=1)
            margin = min(margin, float((top[:, -1] - top[:, -2]).min()))
    return margin


def tiny_config(variant: str) -> ArchitectureConfig:
    return ArchitectureConfig(variant=variant, in_channels=1, num_classes=3, channels=(2, 4))


def network_check(variant: str, seed: int, size: int = 16) -> GradReport:
    """Check a tiny network under CE + Dice loss plus a fixed random projection
    of the logits. The projection keeps every gradient entry well above the
    finite-difference roundoff floor; the loss term checks the full objective.
    Setups whose kinks lie within ``KINK_MARGIN`` are redrawn."""
    from .training import combined_loss

    for draw in range(MAX_DRAWS):
        rng = np.random.default_rng([seed, draw])
        net = build_network(tiny_config(variant), seed=int(rng.integers(2**31)), dtype=np.float64)
        prepare_deformable(net, rng)
        _randomize_norms(net, rng)
        x = _randn(rng, 2, 1, size, size)
        x.requires_grad = True
        if kink_margin(net(x)) >= KINK_MARGIN:
            break
    labels = rng.integers(0, 3, size=(2, size, size))
    proj = Tensor(rng.standard_normal((2, 3, size, size)))

    def objective(out):
        return F.add(combined_loss(out, labels)[0], F.sum(F.mul(out, proj)))

    return check_module(net, {"input": x}, label=variant, seed=seed, loss=objective)


TARGETS = ("primitives", "layers") + VARIANTS


def run_suite(target: str = "all", seeds=(0, 1, 2)) -> list:
    """Run the named group (``primitives``, ``layers``, a variant name or ``all``)."""
    if target != "all" and target not in TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}; choose from all, {', '.join(TARGETS)}")
    names = TARGETS if target == "all" else (target,)
    reports = []
    for seed in seeds:
        for name in names:
            if name == "primitives":
                reports.extend(primitive_checks(seed))
            elif name == "layers":
                reports.extend(layer_checks(seed))
            else:
                reports.append(network_check(name, seed))
    return reports
