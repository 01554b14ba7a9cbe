"""Fast built-in verification: gradient checks, oracle cross-checks, metric fixtures."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evaluation, oracle
from .gradcheck import max_relative_error, numerical_gradient
from .model import CrestModel, gaussian_label
from .tensor import ConvLayer, conv2d_backward, conv2d_forward, l2_loss, relu_backward, relu_forward

GRAD_TOL = 1e-6
FAULTS = ("conv_backward", "oracle", "metrics")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _conv_backward(faults):
    if "conv_backward" not in faults:
        return conv2d_backward

    def broken(x, layer, g, compute_input_grad=True):
        gx, gw, gb = conv2d_backward(x, layer, g, compute_input_grad)
        gw = gw.copy()
        gw.flat[0] += 1e-3
        return gx, gw, gb
    return broken


def check_conv_gradients(faults=(), instances: int = 20) -> str:
    backward = _conv_backward(faults)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(instances):
        c, o, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
        h, w = rng.integers(k, k + 4), rng.integers(k, k + 4)
        x = rng.normal(size=(c, h, w))
        layer = ConvLayer.same(rng.normal(size=(o, c, k, k)), rng.normal(size=o))
        proj = rng.normal(size=layer.output_shape(x.shape))

        def f():
            return float(np.sum(conv2d_forward(x, layer) * proj))
        gx, gw, gb = backward(x, layer, proj)
        worst = max(worst,
                    max_relative_error(gx, numerical_gradient(f, x)),
                    max_relative_error(gw, numerical_gradient(f, layer.weights)),
                    max_relative_error(gb, numerical_gradient(f, layer.bias)))
    if worst >= GRAD_TOL:
        raise AssertionError(f"conv gradient max rel err {worst:.3g} >= {GRAD_TOL}")
    return f"max rel err {worst:.2e}"


def check_relu_l2_gradients(faults=(), instances: int = 20) -> str:
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(instances):
        x = rng.normal(size=(2, 4, 5))
        x[np.abs(x) < 1e-3] = 0.5
        target = rng.normal(size=x.shape)

        def f():
            return l2_loss(relu_forward(x), target)[0]
        _, g = l2_loss(relu_forward(x), target)
        worst = max(worst, max_relative_error(relu_backward(x, g), numerical_gradient(f, x)))
    if worst >= GRAD_TOL:
        raise AssertionError(f"relu/l2 gradient max rel err {worst:.3g} >= {GRAD_TOL}")
    return f"max rel err {worst:.2e}"


def random_model(rng, c: int = 2, n: int = 7, k: int = 3, width: int = 4, lam: float = 0.05,
                 branches: str = "spatiotemporal") -> CrestModel:
    """Small model with O(1) weights and positive branch biases, suited to gradient checks."""
    model = CrestModel.create(c, (k, k), branches=branches, lam=lam,
                              seed=int(rng.integers(1 << 30)), init_std=0.5, width=width)
    for layer in model.spatial[:2] + model.temporal[:2]:
        layer.bias = rng.uniform(0.2, 0.5, size=layer.out_channels)
    model.set_temporal_input(rng.normal(size=(c, n, n)))
    return model


def check_model_gradients(faults=(), instances: int = 3) -> str:
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(instances):
        model = random_model(rng)
        x = rng.normal(size=(2, 7, 7))
        y = gaussian_label((7, 7), (1.0, 1.0))
        _, grads = model.loss_and_grads([(x, y)])
        params = model.parameters()
        for name, p in params.items():
            num = numerical_gradient(lambda: model.loss([(x, y)]), p)
            worst = max(worst, max_relative_error(grads[name], num))
    if worst >= GRAD_TOL:
        raise AssertionError(f"model gradient max rel err {worst:.3g} >= {GRAD_TOL}")
    return f"max rel err {worst:.2e}"


def naive_circular_response(taps, x) -> np.ndarray:
    h, w = x.shape
    out = np.zeros_like(x)
    for u in range(h):
        for v in range(w):
            acc = 0.0
            for m in range(h):
                for n in range(w):
                    acc += taps[m, n] * x[(u + m) % h, (v + n) % w]
            out[u, v] = acc
    return out


def check_oracles(faults=()) -> str:
    rng = np.random.default_rng(14)
    worst_taps = worst_resp = 0.0
    for lam in (1e-4, 0.1, 10.0):
        for h, w in ((4, 4), (6, 5), (8, 8)):
            x = rng.normal(size=(h, w))
            y = rng.normal(size=(h, w))
            a = oracle.solve_dcf_closed_form(x, y, lam)
            b = oracle.solve_dcf_direct(x, y, lam)
            if "oracle" in faults:
                b = oracle.CircularFilter(b.taps + 1e-6)
            worst_taps = max(worst_taps, float(np.max(np.abs(a.taps - b.taps))))
            worst_resp = max(worst_resp, float(np.max(np.abs(
                oracle.circular_response(a, x) - naive_circular_response(a.taps, x)))))
    if worst_taps >= 1e-8 or worst_resp >= 1e-10:
        raise AssertionError(f"oracle disagreement: taps {worst_taps:.3g}, response {worst_resp:.3g}")
    return f"taps {worst_taps:.1e}, response {worst_resp:.1e}"


def check_metrics(faults=()) -> str:
    got = evaluation.iou((0, 0, 2, 2), (1, 0, 2, 2))
    if "metrics" in faults:
        got += 0.1
    if got != 2.0 / 6.0:
        raise AssertionError(f"iou fixture gave {got}, expected 1/3")
    gt = np.array([[10.0, 10.0, 20.0, 20.0]] * 5)
    perfect = evaluation.evaluate_predictions("fixture", gt, gt)
    if perfect.precision_at_20 != 1.0 or perfect.auc != 1.0:
        raise AssertionError("identity predictions must score precision@20 = AUC = 1")
    shifted = gt.copy()
    shifted[1:, 0] += 25.0
    off = evaluation.evaluate_predictions("fixture", shifted, gt)
    if off.precision_at_20 != 0.0 or off.precision_at(30) != 1.0:
        raise AssertionError("25 px offset must give precision@20 = 0 and precision@30 = 1")
    return "iou, precision, success, AUC fixtures exact"


CHECKS: list[tuple[str, Callable]] = [
    ("conv2d gradients", check_conv_gradients),
    ("relu + l2 gradients", check_relu_l2_gradients),
    ("model gradients", check_model_gradients),
    ("dcf oracles", check_oracles),
    ("metrics", check_metrics),
]


def run_checks(faults=()) -> list[CheckResult]:
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown fault(s) {sorted(unknown)}; choose from {FAULTS}")
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn(faults)
            ok = True
        except AssertionError as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
