"""Raster heatmap frames of predicted AQI over the grid."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .grid import GridSpec

# Sequential ramp (dark purple -> blue -> green -> yellow), 9 control points
# at even spacing. Interpolated linearly in RGB into a 256-entry table.
COLORMAP_CONTROL_POINTS = [
    (68, 1, 84),
    (71, 44, 122),
    (59, 81, 139),
    (44, 113, 142),
    (33, 144, 141),
    (39, 173, 129),
    (92, 200, 99),
    (170, 220, 50),
    (253, 231, 37),
]
N_COLORS = 256
OUTLINE_COLOR = (0, 0, 0)


def _build_lut() -> np.ndarray:
    ctrl = np.array(COLORMAP_CONTROL_POINTS, dtype=np.float64)
    at = np.linspace(0.0, 1.0, len(ctrl))
    pos = np.linspace(0.0, 1.0, N_COLORS)
    lut = np.stack([np.interp(pos, at, ctrl[:, c]) for c in range(3)], axis=-1)
    return np.floor(lut + 0.5).astype(np.uint8)


COLORMAP = _build_lut()


@dataclass
class Frame:
    timestamp: str
    values: np.ndarray  # (N,)
    vmin: float
    vmax: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"frame {self.timestamp}: non-finite values")
        if not (np.isfinite(self.vmin) and np.isfinite(self.vmax) and self.vmin < self.vmax):
            raise ValidationError(f"frame {self.timestamp}: color bounds must satisfy min < max, got ({self.vmin}, {self.vmax})")


def color_index(values, vmin: float, vmax: float) -> np.ndarray:
    """Map values to colormap indices 0..255 (monotone; clipped outside bounds)."""
    scaled = (np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin)
    return np.clip(np.floor(scaled * N_COLORS), 0, N_COLORS - 1).astype(np.intp)


def frame_pixels(frame: Frame, spec: GridSpec, scale: int = 8, sensors=None) -> np.ndarray:
    """(rows*scale, cols*scale, 3) uint8 raster; row 0 of the grid at the top."""
    if frame.values.shape != (spec.n,):
        raise ValidationError(f"frame has {frame.values.size} values, grid has {spec.n} cells")
    if scale < 1:
        raise ValidationError("scale must be >= 1")
    rgb = COLORMAP[color_index(frame.values, frame.vmin, frame.vmax)].reshape(spec.rows, spec.cols, 3)
    img = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    if sensors is not None and scale >= 3:
        for node in sensors:
            r, c = divmod(int(node) - 1, spec.cols)
            y0, x0 = r * scale, c * scale
            block = img[y0 : y0 + scale, x0 : x0 + scale]
            block[0, :] = block[-1, :] = OUTLINE_COLOR
            block[:, 0] = block[:, -1] = OUTLINE_COLOR
    return img


def render_frame(frame: Frame, spec: GridSpec, scale: int = 8, sensors=None) -> bytes:
    """PNG bytes for one frame."""
    buf = io.BytesIO()
    Image.fromarray(frame_pixels(frame, spec, scale, sensors), mode="RGB").save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def shared_bounds(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def export_frames(predictions, timestamps, spec: GridSpec, out_dir, scale: int = 8, sensors=None) -> dict:
    """Write frame_0001.png..., values.csv and manifest.json; return the manifest.

    All frames share one color scale spanning the whole sequence.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    timestamps = list(timestamps)
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ValidationError("need a non-empty (timestamps, N) prediction array")
    if pred.shape != (len(timestamps), spec.n):
        raise ValidationError(f"predictions shape {pred.shape} != ({len(timestamps)}, {spec.n})")
    if not np.all(np.isfinite(pred)):
        raise ValidationError("predictions contain non-finite values")
    order = sorted(range(len(timestamps)), key=lambda i: timestamps[i])
    lo, hi = shared_bounds(pred)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(order))))
    frames = []
    with open(out / "values.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "node_id", "aqi_pred"])
        for k, i in enumerate(order, start=1):
            ts = str(timestamps[i])
            name = f"frame_{k:0{width}d}.png"
            (out / name).write_bytes(render_frame(Frame(ts, pred[i], lo, hi), spec, scale, sensors))
            frames.append({"file": name, "timestamp": ts, "min": float(pred[i].min()), "max": float(pred[i].max())})
            for node in range(spec.n):
                w.writerow([ts, node + 1, f"{pred[i, node]:.6f}"])
    manifest = {
        "frames": frames,
        "bounds": {"min": lo, "max": hi},
        "grid": json.loads(spec.to_json()),
        "scale": scale,
        "colormap_control_points": [list(c) for c in COLORMAP_CONTROL_POINTS],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
