"""Online tracking loop: initialization, detection, scale estimation, model update."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .features import (FeatureExtractor, GrayGradExtractor, PcaProjection, apply_pca, crop_patch,
                       fit_pca, standardize, validate_frame)
from .model import (LR_PROFILES, CrestModel, TrainingDiverged, TrainTrace, base_kernel_size,
                    gaussian_label, train_init, train_update)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; ``(x, y)`` is the top-left corner in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive, got {self.w}x{self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class TrackerConfig:
    patch_factor: float = 5.0
    beta: float = 0.6
    scale_set: tuple[float, ...] = (0.97, 1.0, 1.03)
    scale_estimation: bool = True
    update_period: int = 2          # 0 disables online updates
    update_iters: int = 2
    profile: str = "desk"
    init_lr: float | None = None    # None: take from profile
    update_lr: float | None = None
    loss_threshold: float = 0.02
    init_max_iters: int = 100
    sigma_factor: float = 0.1
    lam: float = 1e-4
    seed: int = 0
    branches: str = "spatiotemporal"
    init_std: float = 1e-3
    branch_width: int = 32
    pca_channels: int = 64
    max_feature_side: int = 81
    strict_paper: bool = False
    divergence_ratio: float = 10.0
    subpixel: bool = False          # reserved; integer-cell argmax only
    adaptive_window: bool = True    # search window follows the size estimate; canvas stays fixed

    def __post_init__(self):
        self.scale_set = tuple(sorted(float(s) for s in self.scale_set))
        if 1.0 not in self.scale_set:
            raise ValueError(f"scale_set must contain 1.0, got {self.scale_set}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.update_period < 0:
            raise ValueError("update_period must be >= 0 (0 disables updates)")
        if self.profile not in LR_PROFILES:
            raise ValueError(f"unknown learning-rate profile {self.profile!r}")
        if self.subpixel:
            raise NotImplementedError("sub-pixel argmax refinement is reserved and not implemented")

    @property
    def lrs(self) -> tuple[float, float]:
        init, update = LR_PROFILES[self.profile]
        return (self.init_lr if self.init_lr is not None else init,
                self.update_lr if self.update_lr is not None else update)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_set"] = list(self.scale_set)
        return d


def blend_size(star, prev, beta: float) -> tuple[float, float]:
    """Smoothed size update: ``beta * star + (1 - beta) * prev`` per component."""
    return tuple(beta * s + (1.0 - beta) * p for s, p in zip(star, prev))


def select_scale(scales, scores) -> int:
    """Index of the best-scoring scale; ties go to the scale nearest 1.0, then the smaller one."""
    scores = np.asarray(scores, dtype=np.float64)
    best = np.max(scores)
    tied = [i for i in range(len(scales)) if scores[i] == best]
    return min(tied, key=lambda i: (abs(scales[i] - 1.0), scales[i]))


@dataclass(frozen=True)
class PatchGeometry:
    """Maps response-map cells to image pixels for a square search patch.

    ``patch_px`` is the patch side in image pixels; the patch is resampled to
    ``canvas_px = cells * stride`` pixels before feature extraction.
    """

    patch_px: float
    cells: int
    stride: int

    @property
    def canvas_px(self) -> int:
        return self.cells * self.stride

    @property
    def cell_px(self) -> float:
        return self.patch_px / self.cells

    @property
    def center_cell(self) -> int:
        return self.cells // 2

    def cell_to_offset(self, row: int, col: int, scale: float = 1.0) -> tuple[float, float]:
        """Pixel displacement ``(dx, dy)`` of a cell relative to the patch center."""
        c = self.center_cell
        return (col - c) * self.cell_px * scale, (row - c) * self.cell_px * scale

    def offset_to_cell(self, dx: float, dy: float, scale: float = 1.0) -> tuple[int, int]:
        c = self.center_cell
        return (c + int(round(dy / (self.cell_px * scale))), c + int(round(dx / (self.cell_px * scale))))

    @classmethod
    def for_target(cls, w: float, h: float, patch_factor: float, stride: int,
                   max_side: int) -> "PatchGeometry":
        patch_px = patch_factor * max(w, h)
        cells = min(max(1, round(patch_px / stride)), max_side)
        if cells % 2 == 0:
            cells = cells + 1 if cells < max_side else cells - 1
        return cls(patch_px, max(cells, 1), stride)


def first_argmax(response: np.ndarray) -> tuple[int, int]:
    """Row-major first maximum of a ``(1, H, W)`` or ``(H, W)`` map."""
    r = np.asarray(response)
    if r.ndim == 3:
        r = r[0]
    idx = int(np.argmax(r))
    return divmod(idx, r.shape[1])


@dataclass
class TrackResult:
    bbox: BBox
    response: np.ndarray
    peak_cell: tuple[int, int]
    scale: float
    updated: bool


@dataclass
class TrackerState:
    model: CrestModel
    pca: PcaProjection
    geometry: PatchGeometry
    center: tuple[float, float]
    size: tuple[float, float]
    frame_shape: tuple[int, ...]
    label_sigma: tuple[float, float]
    init_trace: TrainTrace
    frame_index: int = 1
    buffer: list = field(default_factory=list)
    events: list = field(default_factory=list)
    initial_size: tuple[float, float] = (1.0, 1.0)
    adaptive_window: bool = True

    @property
    def bbox(self) -> BBox:
        return BBox.from_center(self.center[0], self.center[1], self.size[0], self.size[1])

    @property
    def window_scale(self) -> float:
        """Search window side relative to the first frame's patch."""
        return self.size[0] / self.initial_size[0] if self.adaptive_window else 1.0


class CrestTracker:
    """Single-target tracker. Construct, call :meth:`init` on frame 1, then :meth:`track` per frame."""

    def __init__(self, config: TrackerConfig | None = None, extractor: FeatureExtractor | None = None):
        self.config = config or TrackerConfig()
        self.extractor = extractor or GrayGradExtractor()
        self.state: TrackerState | None = None

    # feature pipeline ---------------------------------------------------

    def _raw_features(self, frame, center, patch_px: float, geometry: PatchGeometry) -> np.ndarray:
        side = geometry.canvas_px
        patch = crop_patch(frame, center, (patch_px, patch_px), (side, side))
        feats = self.extractor.extract(patch)
        if feats.shape[1:] != (geometry.cells, geometry.cells):
            raise ValueError(f"extractor produced {feats.shape}, expected {geometry.cells}x{geometry.cells} cells")
        return standardize(feats)

    def features(self, frame, center, patch_px: float) -> np.ndarray:
        st = self._require_state()
        return apply_pca(self._raw_features(frame, center, patch_px, st.geometry), st.pca)

    def _require_state(self) -> TrackerState:
        if self.state is None:
            raise RuntimeError("tracker not initialized; call init() first")
        return self.state

    # operations ---------------------------------------------------------

    def init(self, frame, bbox) -> TrackerState:
        cfg = self.config
        frame = validate_frame(frame)
        box = bbox if isinstance(bbox, BBox) else BBox(*bbox)
        H, W = frame.shape[:2]
        x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
        x1, y1 = min(box.x + box.w, W), min(box.y + box.h, H)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {box.as_tuple()} does not overlap the {W}x{H} frame")
        if (x0, y0, x1, y1) != (box.x, box.y, box.x + box.w, box.y + box.h):
            warnings.warn(f"box {box.as_tuple()} clipped to the frame", RuntimeWarning, stacklevel=2)
            box = BBox(x0, y0, x1 - x0, y1 - y0)

        geometry = PatchGeometry.for_target(box.w, box.h, cfg.patch_factor, self.extractor.stride,
                                            cfg.max_feature_side)
        raw = self._raw_features(frame, box.center, geometry.patch_px, geometry)
        pca = fit_pca(raw, min(cfg.pca_channels, raw.shape[0]))
        x1_feats = apply_pca(raw, pca)

        tw, th = box.w / geometry.cell_px, box.h / geometry.cell_px
        sigma = (tw * cfg.sigma_factor, th * cfg.sigma_factor)
        label = gaussian_label((geometry.cells, geometry.cells), sigma)
        kernel = base_kernel_size(tw, th, (geometry.cells, geometry.cells))
        model = CrestModel.create(x1_feats.shape[0], kernel, branches=cfg.branches, lam=cfg.lam,
                                  seed=cfg.seed, init_std=cfg.init_std, width=cfg.branch_width)
        model.set_temporal_input(x1_feats)
        trace = train_init(model, x1_feats, label, lr=cfg.lrs[0], loss_threshold=cfg.loss_threshold,
                           max_iters=cfg.init_max_iters)
        log.debug("init: %d iterations, loss %.4g", trace.iterations, trace.losses[-1])
        self.state = TrackerState(model, pca, geometry, box.center, (box.w, box.h), frame.shape,
                                  sigma, trace, initial_size=(box.w, box.h),
                                  adaptive_window=cfg.adaptive_window)
        return self.state

    def track(self, frame) -> TrackResult:
        st = self._require_state()
        frame = validate_frame(frame)
        if frame.shape != st.frame_shape:
            raise ValueError(f"frame shape {frame.shape} differs from initial frame shape {st.frame_shape}")
        st.frame_index += 1
        geo = st.geometry

        window = st.window_scale
        temporal = st.model.temporal_output()
        x = self.features(frame, st.center, geo.patch_px * window)
        response = st.model.forward(x, temporal)
        row, col = first_argmax(response)
        dx, dy = geo.cell_to_offset(row, col, window)
        st.center = (st.center[0] + dx, st.center[1] + dy)

        scale = 1.0
        if self.config.scale_estimation and len(self.config.scale_set) > 1:
            scale = self.estimate_scale(frame, temporal)
        updated = self.buffer_and_update(x, (row, col))
        return TrackResult(st.bbox, response, (row, col), scale, updated)

    def estimate_scale(self, frame, temporal=None) -> float:
        """Score each scale's patch at the current center and blend the winning size in."""
        st = self._require_state()
        scales = self.config.scale_set
        scores = []
        window = st.window_scale
        if temporal is None:
            temporal = st.model.temporal_output()
        for s in scales:
            xs = self.features(frame, st.center, st.geometry.patch_px * window * s)
            scores.append(float(np.max(st.model.forward(xs, temporal))))
        best = scales[select_scale(scales, scores)]
        star = (st.size[0] * best, st.size[1] * best)
        st.size = blend_size(star, st.size, self.config.beta)
        return best

    def buffer_and_update(self, x, peak_cell) -> bool:
        """Store this frame's training pair; every ``update_period`` frames train on the buffer."""
        st = self._require_state()
        cfg = self.config
        if cfg.update_period == 0:
            return False
        cells = st.geometry.cells
        label = gaussian_label((cells, cells), st.label_sigma, center=(peak_cell[1], peak_cell[0]))
        st.buffer.append((x, label))
        if st.frame_index % cfg.update_period:
            return False
        pairs, st.buffer = st.buffer, []
        try:
            train_update(st.model, pairs, lr=cfg.lrs[1], iters=cfg.update_iters,
                         divergence_ratio=None if cfg.strict_paper else cfg.divergence_ratio)
        except TrainingDiverged as exc:
            if cfg.strict_paper:
                raise
            st.events.append({"frame": st.frame_index, "event": "update_skipped", "reason": str(exc)})
            log.warning("frame %d: model update skipped (%s)", st.frame_index, exc)
            return False
        return True
