import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from aqmap.errors import ValidationError
from aqmap.grid import GridSpec
from aqmap.render import (
    COLORMAP,
    COLORMAP_CONTROL_POINTS,
    OUTLINE_COLOR,
    Frame,
    color_index,
    export_frames,
    render_frame,
)

SPEC = GridSpec(rows=4, cols=5)


def decode(png: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))


def test_colormap_table():
    assert COLORMAP.shape == (256, 3)
    assert tuple(COLORMAP[0]) == COLORMAP_CONTROL_POINTS[0]
    assert tuple(COLORMAP[-1]) == COLORMAP_CONTROL_POINTS[-1]


def test_constant_field_is_uniform():
    img = decode(render_frame(Frame("t", np.full(SPEC.n, 80.0), 79.5, 80.5), SPEC, scale=3))
    assert img.shape == (12, 15, 3)
    assert (img == img[0, 0]).all()


def test_rendering_is_deterministic():
    v = np.random.default_rng(0).uniform(0, 300, SPEC.n)
    f = Frame("t", v, 0.0, 300.0)
    assert render_frame(f, SPEC, 4) == render_frame(Frame("t", v.copy(), 0.0, 300.0), SPEC, 4)


def test_single_maximum_cell_gets_top_color():
    v = np.full(SPEC.n, 10.0)
    node = 14  # row 2, col 3
    v[node - 1] = 99.0
    scale = 6
    img = decode(render_frame(Frame("t", v, 10.0, 99.0), SPEC, scale))
    r, c = divmod(node - 1, SPEC.cols)
    block = img[r * scale : (r + 1) * scale, c * scale : (c + 1) * scale]
    assert (block == COLORMAP[-1]).all()
    mask = np.ones(img.shape[:2], bool)
    mask[r * scale : (r + 1) * scale, c * scale : (c + 1) * scale] = False
    assert (img[mask] == COLORMAP[0]).all()


def test_sensor_outline():
    img = decode(render_frame(Frame("t", np.zeros(SPEC.n), -1.0, 1.0), SPEC, 5, sensors=[1]))
    assert (img[0, :5] == OUTLINE_COLOR).all() and (img[:5, 0] == OUTLINE_COLOR).all()
    assert (img[2, 2] != OUTLINE_COLOR).any()
    assert (img[0, 5] != OUTLINE_COLOR).any()


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_rejected(bad):
    v = np.zeros(SPEC.n)
    v[3] = bad
    with pytest.raises(ValidationError):
        render_frame(Frame("t", v, 0.0, 1.0), SPEC)


def test_bounds_and_length_validated():
    with pytest.raises(ValidationError):
        Frame("t", np.zeros(SPEC.n), 1.0, 1.0)
    with pytest.raises(ValidationError):
        render_frame(Frame("t", np.zeros(SPEC.n - 1), 0.0, 1.0), SPEC)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-1e4, 1e4)))
def test_color_mapping_monotone(values):
    lo, hi = values.min(), values.max()
    if not hi > lo:
        hi = lo + 1.0
    idx = color_index(values, lo, hi)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(idx[order]) >= 0)
    assert idx.min() >= 0 and idx.max() <= 255


def test_export_frames(tmp_path):
    rng = np.random.default_rng(1)
    pred = rng.uniform(20, 200, size=(3, SPEC.n))
    stamps = ["2025-01-01T02:00", "2025-01-01T00:00", "2025-01-01T01:00"]
    manifest = export_frames(pred, stamps, SPEC, tmp_path, scale=2)
    files = [f["file"] for f in manifest["frames"]]
    assert files == ["frame_0001.png", "frame_0002.png", "frame_0003.png"]
    assert [f["timestamp"] for f in manifest["frames"]] == sorted(stamps)
    lo, hi = manifest["bounds"]["min"], manifest["bounds"]["max"]
    assert all(f["max"] <= hi and f["min"] >= lo for f in manifest["frames"])
    assert hi == pred.max() and lo == pred.min()
    rows = list(csv.reader((tmp_path / "values.csv").open()))
    assert rows[0] == ["timestamp", "node_id", "aqi_pred"] and len(rows) - 1 == 3 * SPEC.n
    assert json.loads((tmp_path / "manifest.json").read_text())["grid"]["rows"] == 4
    # the earliest timestamp is the second row of the input
    assert float(rows[1][2]) == pytest.approx(pred[1, 0], abs=1e-6)


def test_export_single_frame(tmp_path):
    manifest = export_frames(np.full((1, SPEC.n), 5.0), ["2025-01-01T00:00"], SPEC, tmp_path)
    assert len(manifest["frames"]) == 1 and (tmp_path / "frame_0001.png").exists()
    with pytest.raises(ValidationError):
        export_frames(np.zeros((0, SPEC.n)), [], SPEC, tmp_path)
