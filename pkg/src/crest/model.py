"""Base correlation layer plus spatial and temporal residual branches."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import (AdamState, ConvLayer, ShapeError, adam_step, as_tensor3, conv2d_backward,
                     conv2d_forward, l2_loss, relu_backward, relu_forward)

BRANCH_MODES = ("base", "spatial", "spatiotemporal")

# (init lr, update lr) per feature family
LR_PROFILES = {
    "paper": (5e-8, 2e-9),
    "desk": (5e-3, 1e-4),
}


class TrainingDiverged(FloatingPointError):
    """Training produced a non-finite or exploding loss; ``trace`` holds the losses so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def gaussian_label(dims, sigma, center=None) -> np.ndarray:
    """Regression target with peak 1.0 at ``center`` (default ``dims // 2``).

    ``dims`` is ``(h, w)``, ``sigma`` is ``(sigma_x, sigma_y)`` in cells and
    ``center`` is ``(cx, cy)``. Returns a ``(1, h, w)`` tensor.
    """
    h, w = int(dims[0]), int(dims[1])
    sx, sy = float(sigma[0]), float(sigma[1])
    if h < 1 or w < 1:
        raise ValueError(f"label dims must be >= 1, got {dims}")
    if not (sx > 0 and sy > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx, cy = (w // 2, h // 2) if center is None else center
    xs = (np.arange(w) - cx) ** 2 / (2.0 * sx * sx)
    ys = (np.arange(h) - cy) ** 2 / (2.0 * sy * sy)
    return np.exp(-(ys[:, None] + xs[None, :]))[None]


def _odd(n: float) -> int:
    k = max(1, math.ceil(n))
    return k if k % 2 else k + 1


def base_kernel_size(target_w_cells: float, target_h_cells: float, map_dims=None) -> tuple[int, int]:
    """Kernel ``(kh, kw)`` covering the target, rounded up to odd and clipped to the map."""
    kh, kw = _odd(target_h_cells), _odd(target_w_cells)
    if map_dims is not None:
        h, w = map_dims
        kh = min(kh, h if h % 2 else h - 1)
        kw = min(kw, w if w % 2 else w - 1)
    return max(kh, 1), max(kw, 1)


def _branch_forward(layers, x):
    """Run conv-ReLU-conv-ReLU-conv; returns output and per-layer inputs for backward."""
    inputs = []
    pre = []
    h = x
    for i, layer in enumerate(layers):
        inputs.append(h)
        z = conv2d_forward(h, layer)
        pre.append(z)
        h = relu_forward(z) if i < len(layers) - 1 else z
    return h, inputs, pre


def _branch_backward(layers, inputs, pre, grad_out, prefix, grads):
    g = grad_out
    for i in reversed(range(len(layers))):
        if i < len(layers) - 1:
            g = relu_backward(pre[i], g)
        gx, gw, gb = conv2d_backward(inputs[i], layers[i], g, compute_input_grad=i > 0)
        grads[f"{prefix}.{i}.weight"] = gw
        grads[f"{prefix}.{i}.bias"] = gb
        g = gx


@dataclass
class CrestModel:
    base: ConvLayer
    spatial: list[ConvLayer]
    temporal: list[ConvLayer]
    branches: str = "spatiotemporal"
    lam: float = 1e-4
    adam: AdamState = field(default_factory=AdamState)
    temporal_input: np.ndarray | None = None

    def __post_init__(self):
        if self.branches not in BRANCH_MODES:
            raise ValueError(f"branches must be one of {BRANCH_MODES}, got {self.branches!r}")
        if self.base.out_channels != 1:
            raise ShapeError(f"base layer must have one output channel, got {self.base.out_channels}")
        for branch in (self.spatial, self.temporal):
            if branch[-1].out_channels != 1 or branch[0].in_channels != self.base.in_channels:
                raise ShapeError("residual branches must map C_in channels to a single channel")
        if self.temporal_input is not None:
            self.temporal_input = as_tensor3(self.temporal_input).copy()
            self.temporal_input.setflags(write=False)

    @classmethod
    def create(cls, in_channels: int, kernel_size, *, branches: str = "spatiotemporal",
               lam: float = 1e-4, seed: int = 0, init_std: float = 1e-3,
               width: int = 32) -> "CrestModel":
        """Zero-mean Gaussian initialization with ``init_std`` for every layer.

        Every branch is drawn regardless of ``branches`` so ablations with one
        seed share identical base weights.
        """
        rng = np.random.default_rng(seed)
        kh, kw = kernel_size
        base = ConvLayer.gaussian_init(rng, 1, in_channels, kh, kw, init_std)

        def branch():
            return [
                ConvLayer.gaussian_init(rng, width, in_channels, 1, 1, init_std),
                ConvLayer.gaussian_init(rng, width, width, 3, 3, init_std),
                ConvLayer.gaussian_init(rng, 1, width, 3, 3, init_std),
            ]

        spatial = branch()
        temporal = branch()
        return cls(base, spatial, temporal, branches, lam)

    @property
    def use_spatial(self) -> bool:
        return self.branches in ("spatial", "spatiotemporal")

    @property
    def use_temporal(self) -> bool:
        return self.branches == "spatiotemporal"

    def set_temporal_input(self, x) -> None:
        if self.temporal_input is not None:
            raise RuntimeError("temporal input is frozen once set")
        x = as_tensor3(x)
        if x.shape[0] != self.base.in_channels:
            raise ShapeError(f"temporal input {x.shape} does not match {self.base.in_channels} channels")
        self.temporal_input = x.copy()
        self.temporal_input.setflags(write=False)

    # parameter plumbing -------------------------------------------------

    def _layers(self):
        yield "base", self.base
        for i, layer in enumerate(self.spatial):
            yield f"spatial.{i}", layer
        for i, layer in enumerate(self.temporal):
            yield f"temporal.{i}", layer

    def _enabled(self, name: str) -> bool:
        if name.startswith("spatial"):
            return self.use_spatial
        if name.startswith("temporal"):
            return self.use_temporal
        return True

    def parameters(self, enabled_only: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            if enabled_only and not self._enabled(name):
                continue
            out[f"{name}.weight"] = layer.weights
            out[f"{name}.bias"] = layer.bias
        return out

    def set_parameters(self, params: dict) -> None:
        layers = dict(self._layers())
        for key, value in params.items():
            lname, kind = key.rsplit(".", 1)
            layer = layers[lname]
            value = np.asarray(value, dtype=np.float64)
            current = layer.weights if kind == "weight" else layer.bias
            if value.shape != current.shape:
                raise ShapeError(f"parameter '{key}' shape {value.shape} != {current.shape}")
            if kind == "weight":
                layer.weights = value.copy()
            else:
                layer.bias = value.copy()

    def copy(self) -> "CrestModel":
        return CrestModel(
            self.base.copy(), [l.copy() for l in self.spatial], [l.copy() for l in self.temporal],
            self.branches, self.lam, self.adam.copy(), self.temporal_input,
        )

    # forward / backward -------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = as_tensor3(x)
        if x.shape[0] != self.base.in_channels:
            raise ShapeError(f"input {x.shape} has {x.shape[0]} channels, model expects {self.base.in_channels}")
        if self.use_temporal:
            if self.temporal_input is None:
                raise ShapeError("temporal branch enabled but no temporal input set")
            if self.temporal_input.shape != x.shape:
                raise ShapeError(f"input {x.shape} does not match temporal input {self.temporal_input.shape}")
        return x

    def branch_outputs(self, x) -> dict[str, np.ndarray]:
        """Each enabled branch's contribution to the response, keyed by branch name."""
        x = self._check_input(x)
        out = {"base": conv2d_forward(x, self.base)}
        if self.use_spatial:
            out["spatial"] = _branch_forward(self.spatial, x)[0]
        if self.use_temporal:
            out["temporal"] = _branch_forward(self.temporal, self.temporal_input)[0]
        return out

    def temporal_output(self) -> np.ndarray | None:
        """Temporal branch output; it depends only on the frozen first-frame input."""
        if not self.use_temporal:
            return None
        if self.temporal_input is None:
            raise ShapeError("temporal branch enabled but no temporal input set")
        return _branch_forward(self.temporal, self.temporal_input)[0]

    def forward(self, x, temporal: np.ndarray | None = None) -> np.ndarray:
        """Response map; pass ``temporal`` from :meth:`temporal_output` to reuse it across calls."""
        if temporal is None or not self.use_temporal:
            parts = self.branch_outputs(x)
            response = parts["base"]
            if "spatial" in parts:
                response = response + parts["spatial"]
            if "temporal" in parts:
                response = response + parts["temporal"]
            return response
        x = self._check_input(x)
        response = conv2d_forward(x, self.base)
        if self.use_spatial:
            response = response + _branch_forward(self.spatial, x)[0]
        return response + temporal

    def regularizer(self) -> float:
        return self.lam * sum(float(np.sum(w * w)) for k, w in self.parameters().items()
                              if k.endswith(".weight"))

    def loss_and_grads(self, pairs) -> tuple[float, dict[str, np.ndarray]]:
        """Summed squared error over ``(X, Y)`` pairs plus ``lam * sum ||W||^2``.

        Gradients include the weight-decay term; biases are not decayed.
        """
        if isinstance(pairs, tuple) and len(pairs) == 2 and not isinstance(pairs[0], tuple):
            pairs = [pairs]
        if not pairs:
            raise ValueError("need at least one (X, Y) pair")
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        loss = 0.0
        grad_temporal_out = None
        t_cache = None
        if self.use_temporal:
            t_out, t_in, t_pre = _branch_forward(self.temporal, self.temporal_input)
            t_cache = (t_in, t_pre)
        for x, y in pairs:
            x = self._check_input(x)
            base_out = conv2d_forward(x, self.base)
            response = base_out
            if self.use_spatial:
                s_out, s_in, s_pre = _branch_forward(self.spatial, x)
                response = response + s_out
            if self.use_temporal:
                response = response + t_out
            y = as_tensor3(y)
            if y.shape != response.shape:
                raise ShapeError(f"label shape {y.shape} != response shape {response.shape}")
            value, g = l2_loss(response, y)
            loss += value
            _, gw, gb = conv2d_backward(x, self.base, g, compute_input_grad=False)
            grads["base.weight"] += gw
            grads["base.bias"] += gb
            if self.use_spatial:
                local = {}
                _branch_backward(self.spatial, s_in, s_pre, g, "spatial", local)
                for k, v in local.items():
                    grads[k] += v
            if self.use_temporal:
                grad_temporal_out = g if grad_temporal_out is None else grad_temporal_out + g
        if self.use_temporal:
            local = {}
            _branch_backward(self.temporal, *t_cache, grad_temporal_out, "temporal", local)
            for k, v in local.items():
                grads[k] += v
        params = self.parameters()
        for k in grads:
            if k.endswith(".weight"):
                grads[k] += 2.0 * self.lam * params[k]
        return loss + self.regularizer(), grads

    def loss(self, pairs) -> float:
        if isinstance(pairs, tuple) and len(pairs) == 2 and not isinstance(pairs[0], tuple):
            pairs = [pairs]
        data = sum(l2_loss(self.forward(x), y)[0] for x, y in pairs)
        return data + self.regularizer()

    def apply_gradients(self, grads: dict, lr: float) -> None:
        new_params, self.adam = adam_step(self.parameters(), grads, self.adam, lr)
        self.set_parameters(new_params)

    # serialization ------------------------------------------------------

    def to_bytes(self, extra_meta: dict | None = None) -> bytes:
        arrays = dict(self.parameters(enabled_only=False))
        for k in sorted(self.adam.m):
            arrays[f"adam.m.{k}"] = self.adam.m[k]
            arrays[f"adam.v.{k}"] = self.adam.v[k]
        if self.temporal_input is not None:
            arrays["temporal_input"] = self.temporal_input
        meta = {
            "kind": "crest_model",
            "branches": self.branches,
            "lam": self.lam,
            "adam": {"beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "step": self.adam.step},
        }
        if extra_meta:
            meta["extra"] = extra_meta
        return container.dumps(arrays, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CrestModel":
        arrays, meta = container.loads(blob)
        if meta.get("kind") != "crest_model":
            raise ValueError(f"not a model snapshot (kind={meta.get('kind')!r})")

        def layer(name):
            return ConvLayer.same(arrays[f"{name}.weight"], arrays[f"{name}.bias"])

        a = meta["adam"]
        adam = AdamState(a["beta1"], a["beta2"], a["eps"], int(a["step"]))
        for k, v in arrays.items():
            if k.startswith("adam.m."):
                adam.m[k[7:]] = v
            elif k.startswith("adam.v."):
                adam.v[k[7:]] = v
        n = sum(1 for k in arrays if k.startswith("spatial.") and k.endswith(".weight"))
        return cls(
            layer("base"),
            [layer(f"spatial.{i}") for i in range(n)],
            [layer(f"temporal.{i}") for i in range(n)],
            meta["branches"], float(meta["lam"]), adam, arrays.get("temporal_input"),
        )

    def save(self, path, extra_meta: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra_meta))

    @classmethod
    def load(cls, path) -> "CrestModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class TrainTrace:
    losses: list[float]
    iterations: int
    converged: bool


def train_init(model: CrestModel, x, y, *, lr: float, loss_threshold: float = 0.02,
               max_iters: int = 500) -> TrainTrace:
    """Adam on one pair until the loss drops below ``loss_threshold``.

    ``losses[k]`` is the loss before step ``k``; the final entry is the loss of
    the returned model. Mutates ``model`` in place.
    """
    losses: list[float] = []
    it = 0
    while True:
        loss, grads = model.loss_and_grads([(x, y)])
        losses.append(loss)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", losses)
        if loss < loss_threshold:
            return TrainTrace(losses, it, True)
        if it >= max_iters:
            return TrainTrace(losses, it, False)
        model.apply_gradients(grads, lr)
        it += 1


def train_update(model: CrestModel, pairs, *, lr: float, iters: int = 2,
                 divergence_ratio: float | None = None) -> list[float]:
    """``iters`` Adam steps on the summed loss of ``pairs``, updating all enabled parameters.

    The model is only modified if every step succeeds. With
    ``divergence_ratio`` set, an update whose final loss exceeds
    ``divergence_ratio`` times the starting loss is rejected as well. Returns
    the loss before each step followed by the final loss.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train_update needs at least one pair")
    if iters <= 0:
        return []
    work = model.copy()
    losses: list[float] = []
    for it in range(iters):
        loss, grads = work.loss_and_grads(pairs)
        losses.append(loss)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at update iteration {it}", losses)
        try:
            work.apply_gradients(grads, lr)
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc), losses) from None
    final = work.loss(pairs)
    losses.append(final)
    if not math.isfinite(final):
        raise TrainingDiverged("non-finite loss after update", losses)
    if divergence_ratio is not None and final > divergence_ratio * max(losses[0], 1e-12):
        raise TrainingDiverged(
            f"update raised loss from {losses[0]:.6g} to {final:.6g} (ratio limit {divergence_ratio})", losses
        )
    model.set_parameters(work.parameters())
    model.adam = work.adam
    return losses
