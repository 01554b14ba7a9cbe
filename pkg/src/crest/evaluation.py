"""One-pass evaluation, tracking metrics and synthetic sequences.

Sequences on disk follow the OTB layout: ``<dir>/img/0001.jpg ...`` plus
``<dir>/groundtruth_rect.txt`` with one 1-based ``x,y,w,h`` box per line.
Boxes are held 0-based in memory.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tracker import BBox, CrestTracker, TrackerConfig

SCHEMA_VERSION = 1
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.round(np.arange(21) * 0.05, 10)
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".ppm", ".pgm", ".bmp"}


class SequenceLoadError(ValueError):
    pass


@dataclass
class Sequence:
    """Frames (file paths or in-memory arrays) with one ground-truth box per frame."""

    name: str
    frames: list
    ground_truth: np.ndarray  # (N, 4) x, y, w, h, 0-based
    attributes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) < 1:
            raise SequenceLoadError(f"{self.name}: sequence has no frames")
        if len(self.frames) != len(self.ground_truth):
            raise SequenceLoadError(
                f"{self.name}: {len(self.frames)} frames but {len(self.ground_truth)} ground-truth boxes"
            )
        if np.any(self.ground_truth[:, 2:] <= 0):
            bad = int(np.argmax(np.any(self.ground_truth[:, 2:] <= 0, axis=1)))
            raise SequenceLoadError(f"{self.name}: non-positive box size on frame {bad + 1}")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if isinstance(f, np.ndarray):
            return f
        return read_image(f)


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


def _frame_key(path: Path):
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def parse_ground_truth(text: str, source: str = "groundtruth_rect.txt") -> np.ndarray:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\t ]+", line) if p]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise SequenceLoadError(f"{source}:{lineno}: cannot parse {line!r}") from None
        if len(vals) != 4:
            raise SequenceLoadError(f"{source}:{lineno}: expected 4 values, got {len(vals)}")
        x, y, w, h = vals
        boxes.append((x - 1.0, y - 1.0, w, h))
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def load_sequence(path) -> Sequence:
    root = Path(path)
    if not root.is_dir():
        raise SequenceLoadError(f"sequence directory not found: {root}")
    gt_path = root / "groundtruth_rect.txt"
    if not gt_path.is_file():
        raise SequenceLoadError(f"missing ground truth file: {gt_path}")
    gt = parse_ground_truth(gt_path.read_text(), str(gt_path))
    img_dir = root / "img"
    if not img_dir.is_dir():
        raise SequenceLoadError(f"missing frame directory: {img_dir}")
    frames = sorted((p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_frame_key)
    # numbered frames must be contiguous so a missing file is reported by name
    numbers = [_frame_key(p)[0] for p in frames]
    if frames and all(n >= 0 for n in numbers):
        width = len(re.findall(r"\d+", frames[0].stem)[-1])
        expected = range(numbers[0], numbers[0] + len(gt))
        have = set(numbers)
        for n in expected:
            if n not in have:
                missing = img_dir / f"{n:0{width}d}{frames[0].suffix}"
                raise SequenceLoadError(f"missing frame file: {missing}")
    if len(frames) != len(gt):
        raise SequenceLoadError(f"{root}: {len(frames)} frame files but {len(gt)} ground-truth lines")
    attrs_path = root / "attributes.txt"
    attrs = attrs_path.read_text().split() if attrs_path.is_file() else []
    return Sequence(root.name, [str(p) for p in frames], gt, attrs)


# metrics -----------------------------------------------------------------

def iou(a, b) -> float:
    ax, ay, aw, ah = a.as_tuple() if isinstance(a, BBox) else a
    bx, by, bw, bh = b.as_tuple() if isinstance(b, BBox) else b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def center_error(a, b) -> float:
    a = np.asarray(a.as_tuple() if isinstance(a, BBox) else a, dtype=np.float64)
    b = np.asarray(b.as_tuple() if isinstance(b, BBox) else b, dtype=np.float64)
    ca = a[:2] + a[2:] / 2.0
    cb = b[:2] + b[2:] / 2.0
    return float(np.hypot(*(ca - cb)))


def precision_curve(errors, thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return np.ones(len(thresholds))
    return np.array([np.mean(errors <= t) for t in thresholds])


def success_curve(overlaps, thresholds=SUCCESS_THRESHOLDS) -> np.ndarray:
    overlaps = np.asarray(overlaps, dtype=np.float64)
    if overlaps.size == 0:
        return np.ones(len(thresholds))
    return np.array([np.mean(overlaps >= t) for t in thresholds])


@dataclass
class OpeResult:
    name: str
    predictions: np.ndarray     # (N, 4)
    ground_truth: np.ndarray    # (N, 4)
    center_errors: np.ndarray   # (N,), frame 1 included for reference
    overlaps: np.ndarray        # (N,)
    precision: np.ndarray       # over PRECISION_THRESHOLDS
    success: np.ndarray         # over SUCCESS_THRESHOLDS
    info: dict = field(default_factory=dict)

    @property
    def auc(self) -> float:
        return float(np.mean(self.success))

    @property
    def precision_at_20(self) -> float:
        return float(self.precision[20])

    def precision_at(self, threshold: float) -> float:
        return float(np.mean(self.center_errors[1:] <= threshold)) if len(self.center_errors) > 1 else 1.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.overlaps[1:])) if len(self.overlaps) > 1 else 1.0

    def to_dict(self, config: dict | None = None) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "config": config or {},
            "metric_frames": "2..N (frame 1 is the given initialization)",
            "auc": self.auc,
            "precision_at_20": self.precision_at_20,
            "mean_iou": self.mean_iou,
            "precision_thresholds": PRECISION_THRESHOLDS.tolist(),
            "precision": self.precision.tolist(),
            "success_thresholds": SUCCESS_THRESHOLDS.tolist(),
            "success": self.success.tolist(),
            "predictions": self.predictions.tolist(),
            "ground_truth": self.ground_truth.tolist(),
            "center_errors": self.center_errors.tolist(),
            "overlaps": self.overlaps.tolist(),
            "info": self.info,
        }


def evaluate_predictions(name: str, predictions, ground_truth, info: dict | None = None) -> OpeResult:
    """Per-frame errors and curves; frame 1 is excluded from the curves."""
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 4)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    errs = np.array([center_error(p, g) for p, g in zip(pred, gt)])
    ious = np.array([iou(p, g) for p, g in zip(pred, gt)])
    return OpeResult(name, pred, gt, errs, ious, precision_curve(errs[1:]), success_curve(ious[1:]),
                     dict(info or {}))


def run_ope(config: TrackerConfig | None, sequence: Sequence,
            tracker_factory: Callable[[], object] | None = None,
            on_frame: Callable[[int, object], None] | None = None) -> OpeResult:
    """Initialize on frame 1's ground truth and track every later frame once.

    The tracker only ever sees frames; ground truth after frame 1 is used
    solely for scoring.
    """
    tracker = tracker_factory() if tracker_factory else CrestTracker(config or TrackerConfig())
    first = BBox(*sequence.ground_truth[0])
    try:
        tracker.init(sequence.frame(0), first)
    except Exception as exc:
        raise RuntimeError(f"{sequence.name}: frame 1: {exc}") from exc
    preds = [first.as_tuple()]
    for i in range(1, len(sequence)):
        try:
            result = tracker.track(sequence.frame(i))
        except Exception as exc:
            raise RuntimeError(f"{sequence.name}: frame {i + 1}: {exc}") from exc
        box = result.bbox if hasattr(result, "bbox") else result
        preds.append(box.as_tuple() if isinstance(box, BBox) else tuple(box))
        if on_frame is not None:
            on_frame(i, result)
    info = {}
    state = getattr(tracker, "state", None)
    if state is not None and hasattr(state, "init_trace"):
        info = {
            "init_iterations": state.init_trace.iterations,
            "init_final_loss": state.init_trace.losses[-1],
            "init_converged": state.init_trace.converged,
            "events": list(state.events),
        }
    return evaluate_predictions(sequence.name, preds, sequence.ground_truth, info)


def run_many(config: TrackerConfig, sequences: Sequence, jobs: int = 1) -> list[OpeResult]:
    """Evaluate sequences on up to ``jobs`` worker threads; results keep input order."""
    if jobs <= 1 or len(sequences) <= 1:
        return [run_ope(config, s) for s in sequences]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: run_ope(config, s), sequences))


# result files -------------------------------------------------------------

def curves_csv(result: OpeResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["curve", "threshold", "value"])
    for t, v in zip(PRECISION_THRESHOLDS, result.precision):
        w.writerow(["precision", f"{t:g}", repr(float(v))])
    for t, v in zip(SUCCESS_THRESHOLDS, result.success):
        w.writerow(["success", f"{t:g}", repr(float(v))])
    return buf.getvalue()


def _polyline(xs, ys, x0, y0, width, height, xmax) -> str:
    pts = " ".join(f"{x0 + width * x / xmax:.2f},{y0 + height * (1 - y):.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="#c0392b" stroke-width="2" points="{pts}"/>'


def _panel(title, xs, ys, xmax, xlabel, x0) -> list[str]:
    y0, w, h = 30, 300, 220
    out = [
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>',
        f'<text x="{x0 + w / 2}" y="{y0 - 10}" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{x0 + w / 2}" y="{y0 + h + 30}" text-anchor="middle" font-size="12">{xlabel}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        out.append(f'<text x="{x0 - 5}" y="{y0 + h * (1 - frac) + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{frac:g}</text>')
        out.append(f'<text x="{x0 + w * frac:.1f}" y="{y0 + h + 14}" text-anchor="middle" '
                   f'font-size="10">{xmax * frac:g}</text>')
    out.append(_polyline(xs, ys, x0, y0, w, h, xmax))
    return out


def plots_svg(result: OpeResult) -> str:
    body = _panel(f"Precision (P@20={result.precision_at_20:.3f})", PRECISION_THRESHOLDS,
                  result.precision, 50.0, "location error threshold (px)", 50)
    body += _panel(f"Success (AUC={result.auc:.3f})", SUCCESS_THRESHOLDS, result.success, 1.0,
                   "overlap threshold", 420)
    return ('<svg xmlns="http://www.w3.org/2000/svg" width="760" height="300">\n'
            f"<!-- {result.name} -->\n" + "\n".join(body) + "\n</svg>\n")


def write_results(result: OpeResult, out_dir, config: dict | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / f"{result.name}.ope.json",
        "csv": out / f"{result.name}.curves.csv",
        "svg": out / f"{result.name}.plots.svg",
    }
    paths["json"].write_text(json.dumps(result.to_dict(config), indent=1, sort_keys=True) + "\n")
    paths["csv"].write_text(curves_csv(result))
    paths["svg"].write_text(plots_svg(result))
    return paths


# synthetic sequences --------------------------------------------------------

@dataclass
class SynthSpec:
    length: int = 50
    frame_size: tuple[int, int] = (160, 160)   # (H, W)
    target_size: tuple[float, float] = (15.0, 15.0)  # (w, h)
    start: tuple[float, float] | None = None    # target center; default frame center
    motion: tuple[float, float] = (0.0, 0.0)    # px/frame, reflected at the borders
    scale_drift: float = 0.0                    # relative size change per frame
    clutter: int = 0                            # number of target-like distractors
    noise: float = 0.0                          # pixel noise std (0-255 scale)
    seed: int = 0
    name: str = "synth"

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """Parse ``key=value`` pairs separated by ``;`` (tuple values use ``,``)."""
        spec = cls()
        for item in filter(None, (s.strip() for s in text.split(";"))):
            if "=" not in item:
                raise ValueError(f"bad synth spec item {item!r}; expected key=value")
            key, val = (s.strip() for s in item.split("=", 1))
            if not hasattr(spec, key):
                raise ValueError(f"unknown synth spec key {key!r}")
            cur = getattr(spec, key)
            if key == "name":
                setattr(spec, key, val)
            elif isinstance(cur, tuple) or key == "start":
                setattr(spec, key, tuple(float(v) for v in val.split(",")))
            elif isinstance(cur, int):
                setattr(spec, key, int(val))
            else:
                setattr(spec, key, float(val))
        spec.frame_size = tuple(int(v) for v in spec.frame_size)
        return spec


def _smooth_noise(rng, shape, cell: int) -> np.ndarray:
    h, w = shape
    coarse = rng.uniform(0.0, 1.0, size=(h // cell + 2, w // cell + 2))
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def _paste(canvas, texture, cx, cy, w, h):
    """Render ``texture`` stretched over the box centered at ``(cx, cy)``."""
    H, W = canvas.shape
    x0, x1 = max(int(np.floor(cx - w / 2)), 0), min(int(np.ceil(cx + w / 2)), W)
    y0, y1 = max(int(np.floor(cy - h / 2)), 0), min(int(np.ceil(cy + h / 2)), H)
    if x1 <= x0 or y1 <= y0:
        return
    th, tw = texture.shape
    px = np.arange(x0, x1) + 0.5
    py = np.arange(y0, y1) + 0.5
    u = (px - (cx - w / 2)) / w
    v = (py - (cy - h / 2)) / h
    inside_x = (u >= 0) & (u < 1)
    inside_y = (v >= 0) & (v < 1)
    tu = np.clip(u * tw - 0.5, 0, tw - 1)
    tv = np.clip(v * th - 0.5, 0, th - 1)
    iu = np.floor(tu).astype(int)
    iv = np.floor(tv).astype(int)
    fu = (tu - iu)[None, :]
    fv = (tv - iv)[:, None]
    iu1 = np.minimum(iu + 1, tw - 1)
    iv1 = np.minimum(iv + 1, th - 1)
    vals = ((texture[iv][:, iu] * (1 - fu) + texture[iv][:, iu1] * fu) * (1 - fv)
            + (texture[iv1][:, iu] * (1 - fu) + texture[iv1][:, iu1] * fu) * fv)
    mask = inside_y[:, None] & inside_x[None, :]
    region = canvas[y0:y1, x0:x1]
    region[mask] = vals[mask]


def _target_texture(rng, size: int = 32) -> np.ndarray:
    tex = 0.65 * _smooth_noise(rng, (size, size), 4) + 0.35 * _smooth_noise(rng, (size, size), 2)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    return 20.0 + 215.0 * tex


def synth_sequence(spec: SynthSpec) -> Sequence:
    """Deterministic textured target moving over a textured background."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.frame_size
    background = 90.0 + 70.0 * _smooth_noise(rng, (H, W), 8)
    target = _target_texture(rng)
    w0, h0 = spec.target_size
    cx, cy = spec.start if spec.start is not None else (W / 2.0, H / 2.0)
    vx, vy = spec.motion

    distractors = []
    for _ in range(spec.clutter):
        tex = _target_texture(rng)
        dx = rng.uniform(w0, W - w0)
        dy = rng.uniform(h0, H - h0)
        distractors.append((tex, dx, dy))

    frames, boxes = [], []
    for t in range(spec.length):
        s = (1.0 + spec.scale_drift) ** t
        w, h = w0 * s, h0 * s
        canvas = background.copy()
        for tex, dx, dy in distractors:
            _paste(canvas, tex, dx, dy, w0, h0)
        _paste(canvas, target, cx, cy, w, h)
        if spec.noise > 0:
            canvas = canvas + rng.normal(0.0, spec.noise, size=canvas.shape)
        frames.append(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
        boxes.append((cx - w / 2, cy - h / 2, w, h))
        # advance with reflection so the whole box stays inside the frame
        cx, vx = _reflect(cx + vx, vx, w / 2 + 1, W - w / 2 - 1)
        cy, vy = _reflect(cy + vy, vy, h / 2 + 1, H - h / 2 - 1)
    return Sequence(spec.name, frames, np.asarray(boxes), ["synthetic"])


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return (lo + hi) / 2, 0.0
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def write_sequence(seq: Sequence, out_dir) -> Path:
    """Write a sequence in the OTB layout (PNG frames, 1-based ground truth)."""
    from PIL import Image

    root = Path(out_dir)
    (root / "img").mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        Image.fromarray(seq.frame(i)).save(root / "img" / f"{i + 1:04d}.png")
    lines = [",".join(repr(float(v)) for v in (x + 1, y + 1, w, h)) for x, y, w, h in seq.ground_truth]
    (root / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    return root
