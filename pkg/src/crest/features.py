"""Patch cropping, feature extraction and first-frame PCA.

Frames are ``numpy`` arrays: ``(H, W)`` gray or ``(H, W, 3)`` RGB, usually
uint8. Image coordinates are continuous with pixel ``k`` covering ``[k, k+1)``,
so the center of pixel ``k`` sits at ``k + 0.5``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import container
from .tensor import ConvLayer, ShapeError, conv2d_forward, relu_forward


class FeatureExtractor(Protocol):
    name: str
    stride: int
    out_channels: int

    def extract(self, patch: np.ndarray) -> np.ndarray: ...


def validate_frame(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 3 and frame.shape[2] == 1:
        frame = frame[:, :, 0]
    if frame.ndim not in (2, 3) or (frame.ndim == 3 and frame.shape[2] != 3):
        raise ShapeError(f"frame must be (H, W) gray or (H, W, 3) RGB, got shape {frame.shape}")
    if frame.shape[0] < 1 or frame.shape[1] < 1:
        raise ShapeError(f"empty frame of shape {frame.shape}")
    return frame


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ np.array([0.299, 0.587, 0.114])


def crop_patch(frame, center, size, out_size) -> np.ndarray:
    """Crop a ``size=(w, h)`` window centered at ``center=(x, y)`` and resample it.

    Bilinear interpolation; samples outside the frame take the nearest border
    pixel. Returns a float64 array of shape ``(out_h, out_w[, 3])``.
    """
    frame = validate_frame(frame)
    sw, sh = float(size[0]), float(size[1])
    ow, oh = int(out_size[0]), int(out_size[1])
    if not (sw > 0 and sh > 0):
        raise ValueError(f"crop size must be positive, got {size}")
    if ow <= 0 or oh <= 0:
        raise ValueError(f"output size must be positive, got {out_size}")
    cx, cy = float(center[0]), float(center[1])
    H, W = frame.shape[:2]

    # continuous sample positions converted to array-index coordinates
    u = cx - sw / 2.0 + (np.arange(ow) + 0.5) * (sw / ow) - 0.5
    v = cy - sh / 2.0 + (np.arange(oh) + 0.5) * (sh / oh) - 0.5
    u = np.clip(u, 0.0, W - 1)
    v = np.clip(v, 0.0, H - 1)
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    fx = u - x0
    fy = v - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)

    img = frame.astype(np.float64)
    if img.ndim == 3:
        fx = fx[None, :, None]
        fy = fy[:, None, None]
    else:
        fx = fx[None, :]
        fy = fy[:, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _filter3x3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * p[i:i + h, j:j + w]
    return out


def extract_features_gray_grad(patch) -> np.ndarray:
    """Gray level plus horizontal/vertical Sobel responses, each zero-mean.

    Pixel values are taken to be in ``[0, 255]``.
    """
    gray = to_gray(patch) / 255.0 - 0.5
    if gray.size == 0:
        raise ShapeError("empty patch")
    gx = _filter3x3(gray, _SOBEL_X) / 8.0
    gy = _filter3x3(gray, _SOBEL_X.T) / 8.0
    feats = np.stack([gray, gx, gy])
    return feats - feats.mean(axis=(1, 2), keepdims=True)


class GrayGradExtractor:
    """Default three-channel, stride-1 extractor."""

    name = "gray_grad"
    stride = 1
    out_channels = 3

    def extract(self, patch) -> np.ndarray:
        return extract_features_gray_grad(patch)


def max_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with ceil output size (odd edges pooled alone)."""
    c, h, w = x.shape
    hh, ww = -(-h // 2), -(-w // 2)
    p = np.full((c, 2 * hh, 2 * ww), -np.inf)
    p[:, :h, :w] = x
    return p.reshape(c, hh, 2, ww, 2).max(axis=(2, 4))


@dataclass(frozen=True)
class ConvStage:
    layer: ConvLayer | None = None
    relu: bool = True
    pool: bool = False


class ConvStackExtractor:
    """Applies a fixed sequence of conv(+ReLU) and 2x2 max-pool stages.

    Patches are scaled to ``[0, 1]``; a 1-channel stack sees the gray image,
    a 3-channel stack sees RGB (gray patches are replicated).
    """

    def __init__(self, stages: Sequence[ConvStage], name: str = "conv_stack"):
        stages = list(stages)
        convs = [s.layer for s in stages if s.layer is not None]
        if not convs:
            raise ValueError("conv stack needs at least one conv stage")
        for prev, nxt in zip(convs, convs[1:]):
            if nxt.in_channels != prev.out_channels:
                raise ValueError(
                    f"conv stack channel mismatch: {prev.weights.shape} feeds {nxt.weights.shape}"
                )
        if convs[0].in_channels not in (1, 3):
            raise ValueError(f"first conv must take 1 or 3 channels, got {convs[0].in_channels}")
        self.stages = stages
        self.name = name
        self.in_channels = convs[0].in_channels
        self.out_channels = convs[-1].out_channels
        self.stride = 2 ** sum(1 for s in stages if s.pool)

    def _prepare(self, patch) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64) / 255.0
        if self.in_channels == 1:
            return to_gray(patch)[None]
        if patch.ndim == 2:
            return np.repeat(patch[None], 3, axis=0)
        return np.moveaxis(patch, 2, 0)

    def extract(self, patch) -> np.ndarray:
        x = self._prepare(patch)
        for stage in self.stages:
            if stage.layer is not None:
                x = conv2d_forward(x, stage.layer)
                if stage.relu:
                    x = relu_forward(x)
            if stage.pool:
                x = max_pool2(x)
        return x


def save_conv_stack(path, stages: Sequence[ConvStage], name: str = "conv_stack") -> None:
    arrays = {}
    layers = []
    for i, stage in enumerate(stages):
        rec = {"pool": bool(stage.pool)}
        if stage.layer is not None:
            arrays[f"conv{i}.weight"] = stage.layer.weights
            arrays[f"conv{i}.bias"] = stage.layer.bias
            rec.update(conv=f"conv{i}", relu=bool(stage.relu))
        layers.append(rec)
    container.save(path, arrays, {"kind": "conv_stack", "name": name, "layers": layers})


def load_conv_stack(path) -> ConvStackExtractor:
    """Load an extractor written by :func:`save_conv_stack`.

    Raises :class:`container.ContainerError` for malformed bytes and
    ``ValueError`` for inconsistent layer declarations.
    """
    arrays, meta = container.load(path)
    if meta.get("kind") != "conv_stack":
        raise ValueError(f"{path}: not a conv stack file (kind={meta.get('kind')!r})")
    stages = []
    for i, rec in enumerate(meta.get("layers", [])):
        layer = None
        if "conv" in rec:
            key = rec["conv"]
            try:
                w, b = arrays[f"{key}.weight"], arrays[f"{key}.bias"]
            except KeyError:
                raise ValueError(f"{path}: layer {i} references missing arrays '{key}.*'") from None
            if w.ndim != 4:
                raise ValueError(f"{path}: layer {i} weight shape {w.shape} is not 4-D")
            try:
                layer = ConvLayer.same(w, b)
            except ShapeError as exc:
                raise ValueError(f"{path}: layer {i}: {exc}") from None
        stages.append(ConvStage(layer, bool(rec.get("relu", True)), bool(rec.get("pool", False))))
    return ConvStackExtractor(stages, meta.get("name", "conv_stack"))


def standardize(features: np.ndarray) -> np.ndarray:
    """Remove the per-channel spatial mean."""
    return features - features.mean(axis=(1, 2), keepdims=True)


@dataclass
class PcaProjection:
    mean: np.ndarray   # (C_in,)
    basis: np.ndarray  # (C_in, C_out), orthonormal columns (zero columns if rank-deficient)
    rank_deficient: bool = False

    @property
    def in_channels(self) -> int:
        return self.basis.shape[0]

    @property
    def out_channels(self) -> int:
        return self.basis.shape[1]


def fit_pca(features, out_channels: int, rank_tol: float = 1e-12) -> PcaProjection:
    """Fit a channel projection treating each spatial location as one sample."""
    x = np.asarray(features, dtype=np.float64)
    c = x.shape[0]
    if out_channels < 1 or out_channels > c:
        raise ValueError(f"out_channels must be in [1, {c}], got {out_channels}")
    samples = x.reshape(c, -1).T
    if samples.shape[0] < c:
        raise ValueError(f"need at least {c} spatial samples for {c} channels, got {samples.shape[0]}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    basis = evecs[:, :out_channels].copy()
    for k in range(out_channels):
        col = basis[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, k] = -col
    scale = max(evals[0], 0.0)
    rank = int(np.sum(evals > rank_tol * scale)) if scale > 0 else 0
    deficient = rank < out_channels
    if deficient:
        basis[:, rank:] = 0.0
        warnings.warn(f"PCA covariance rank {rank} < requested {out_channels} channels; basis zero-padded",
                      RuntimeWarning, stacklevel=2)
    return PcaProjection(mean, basis, deficient)


def apply_pca(features, proj: PcaProjection) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != proj.in_channels:
        raise ShapeError(f"features have {x.shape[0]} channels, projection expects {proj.in_channels}")
    centered = x - proj.mean[:, None, None]
    return np.tensordot(proj.basis.T, centered, axes=1)


def output_dims(extractor: FeatureExtractor, patch_h: int, patch_w: int) -> tuple[int, int]:
    s = extractor.stride
    return math.ceil(patch_h / s), math.ceil(patch_w / s)
