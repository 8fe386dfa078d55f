"""Finite-difference gradient verification over every differentiable op and a
small end-to-end network, used by the `gradcheck` command."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, AttentionWeights,
                        multi_head_self_attention, relative_logits,
                        scaled_dot_attention)
from .network import NetworkConfig, build
from .tensor import BatchNormState, Tensor
from .training import bce_with_logits

SMOOTH_TOL = 1e-6     # elementwise/matmul-style ops
PIECEWISE_TOL = 1e-4  # relu/batchnorm and composites that include them


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_scalar_fn(build_fn, inputs: list[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of scalar build_fn() against finite differences
    for every tensor in `inputs`; returns the worst relative error."""
    out = build_fn()
    for t in inputs:
        t.zero_grad()
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: build_fn().item(), t.data, eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def make_scalarizer(rng: np.random.Generator):
    """Fixed random linear functional y -> w·y so every output entry carries
    an O(1) gradient signal (weights are created once per check)."""
    cache: dict[int, Tensor] = {}

    def scalarize(t: Tensor) -> Tensor:
        n = t.data.size
        if n not in cache:
            cache[n] = Tensor(rng.normal(0, 1, (n, 1)))
        return T.mean_all(T.matmul(T.reshape(t, (1, n)), cache[n]))

    return scalarize


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    sc = make_scalarizer(np.random.default_rng(seed + 12345))

    def rand(*shape):
        return Tensor(rng.normal(0, 1, shape), requires_grad=True)

    # conv2d: a windowed composite, so finite-difference roundoff over its
    # large output accumulates past the elementwise tier
    x = rand(2, 3, 8, 8)
    w = rand(4, 3, 3, 3)
    b = rand(4)
    results.append(CheckResult("conv2d", check_scalar_fn(
        lambda: sc(T.conv2d(x, w, b, stride=1, padding=1)), [x, w, b]),
        PIECEWISE_TOL))

    # matmul
    a = rand(4, 5)
    m = rand(5, 6)
    results.append(CheckResult("matmul", check_scalar_fn(
        lambda: sc(T.matmul(a, m)), [a, m]), SMOOTH_TOL))

    # softmax
    s = rand(3, 7)
    results.append(CheckResult("softmax", check_scalar_fn(
        lambda: sc(T.softmax(s, axis=1)), [s]), SMOOTH_TOL))

    # sigmoid
    g = rand(3, 5)
    results.append(CheckResult("sigmoid", check_scalar_fn(
        lambda: sc(T.sigmoid(g)), [g]), SMOOTH_TOL))

    # concat-channels
    c1, c2, c3 = rand(2, 3, 4, 4), rand(2, 2, 4, 4), rand(2, 4, 4, 4)
    results.append(CheckResult("concat_channels", check_scalar_fn(
        lambda: sc(T.concat_channels([c1, c2, c3])), [c1, c2, c3]),
        SMOOTH_TOL))

    # avgpool / global avgpool
    p = rand(2, 3, 6, 6)
    results.append(CheckResult("avgpool2d", check_scalar_fn(
        lambda: sc(T.avgpool2d(p, 2, 2)), [p]), SMOOTH_TOL))
    results.append(CheckResult("global_avgpool", check_scalar_fn(
        lambda: sc(T.global_avgpool(p)), [p]), SMOOTH_TOL))

    # batchnorm (train mode)
    bx = rand(4, 3, 5, 5)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = rand(3)

    def bn():
        state = BatchNormState(3)
        return sc(T.batchnorm2d(bx, gamma, beta, state, train=True))

    results.append(CheckResult("batchnorm2d", check_scalar_fn(
        bn, [bx, gamma, beta]), PIECEWISE_TOL))

    # relu / add / scale
    r = rand(3, 4)
    results.append(CheckResult("relu", check_scalar_fn(
        lambda: sc(T.relu(r)), [r]), PIECEWISE_TOL))
    a1, a2 = rand(3, 4), rand(3, 4)
    results.append(CheckResult("add", check_scalar_fn(
        lambda: sc(T.add(a1, a2)), [a1, a2]), SMOOTH_TOL))
    results.append(CheckResult("scale", check_scalar_fn(
        lambda: sc(T.scale(a1, 1.7)), [a1]), SMOOTH_TOL))

    # scaled dot attention
    q, k = rand(2, 5, 3), rand(2, 5, 3)
    v = rand(2, 5, 4)
    results.append(CheckResult("scaled_dot_attention", check_scalar_fn(
        lambda: sc(scaled_dot_attention(q, k, v)), [q, k, v]), SMOOTH_TOL))

    # relative logits
    rq = rand(2, 6, 3)
    rh = rand(5, 3)
    rw = rand(3, 3)
    results.append(CheckResult("relative_logits", check_scalar_fn(
        lambda: sc(relative_logits(rq, rh, rw, 3, 2)), [rq, rh, rw]),
        SMOOTH_TOL))

    # MHSA
    cfg = AttentionConfig(num_heads=2, key_dim=2, value_dim=2, output_dim=4,
                          relative_positions=True, max_rel_extent=4)
    weights = AttentionWeights(5, cfg, "attn", rng)
    mx = rand(1, 5, 3, 3)
    results.append(CheckResult("multi_head_self_attention", check_scalar_fn(
        lambda: sc(multi_head_self_attention(mx, weights, cfg)),
        [mx] + weights.parameters()), SMOOTH_TOL))

    # upsample
    ux = rand(1, 2, 3, 3)
    results.append(CheckResult("upsample_nearest", check_scalar_fn(
        lambda: sc(T.upsample_nearest(ux, 2)), [ux]), SMOOTH_TOL))

    # bce with logits
    lz = rand(3, 4)
    targets = (rng.random((3, 4)) > 0.5).astype(np.float64)
    results.append(CheckResult("bce_with_logits", check_scalar_fn(
        lambda: bce_with_logits(lz, targets), [lz]), SMOOTH_TOL))

    # end-to-end: tiny network loss w.r.t. a sample of parameters
    results.append(CheckResult("end_to_end_network",
                               end_to_end_check(seed, num_params=8), 1e-3))
    return results


def end_to_end_check(seed: int, num_params: int = 20,
                     eps: float = 1e-5) -> float:
    """Gradient of the training loss w.r.t. randomly chosen parameter entries
    of a desk-scale attention-augmented network on a 2-sample batch."""
    rng = np.random.default_rng(seed + 1)
    cfg = NetworkConfig(input_size=(8, 8), stem_channels=8,
                        block_layout=(1, 1), growth_rate=4,
                        attention_placement=(0,), attention_heads=2)
    net = build(cfg, seed)
    batch = rng.normal(0, 1, (2, 3, 8, 8))
    targets = (rng.random((2, cfg.num_classes)) > 0.5).astype(np.float64)

    def loss_value() -> float:
        # fresh running-state copies so repeated train-mode passes match
        saved = [(bn.state.running_mean.copy(), bn.state.running_var.copy())
                 for bn in net.batchnorms()]
        out = bce_with_logits(net.forward(Tensor(batch), train=True), targets)
        for bn, (m, v) in zip(net.batchnorms(), saved):
            bn.state.running_mean, bn.state.running_var = m, v
        return out

    net.zero_grad()
    loss = loss_value()
    loss.backward()

    params = list(net.parameters().values())
    worst = 0.0
    for _ in range(num_params):
        p = params[rng.integers(len(params))]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        analytic = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_value().item()
        flat[i] = orig - eps
        down = loss_value().item()
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        # the loss is O(1), so central differences carry ~1e-11 of roundoff;
        # below the 1e-6 floor the comparison holds no signal either way
        denom = max(abs(analytic) + abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
