"""Grid cells as graph nodes, thresholded Gaussian kernel adjacency."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, GridIndexError, MissingFileError, ParameterError, ValidationError

KM_PER_DEG_LAT = 111.32

DEFAULT_SIGMA_KM = 2.0
DEFAULT_THRESHOLD_R = 0.01


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid of square cells.

    ``origin_lat``/``origin_lon`` locate the north-west corner; row 0 is the
    northern edge and columns run eastward. Node ids are 1-based, row-major.
    """

    origin_lat: float = 31.75
    origin_lon: float = 74.10
    rows: int = 49
    cols: int = 49
    cell_size_km: float = 1.0

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ParameterError("rows and cols must be integers")
        if self.rows < 1 or self.cols < 1:
            raise ParameterError(f"grid must have rows >= 1 and cols >= 1, got {self.rows}x{self.cols}")
        if not self.cell_size_km > 0:
            raise ParameterError(f"cell_size_km must be positive, got {self.cell_size_km}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def to_json(self) -> str:
        return json.dumps(
            {
                "origin_lat": self.origin_lat,
                "origin_lon": self.origin_lon,
                "rows": self.rows,
                "cols": self.cols,
                "cell_size_km": self.cell_size_km,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "GridSpec":
        try:
            obj = json.loads(text)
            return cls(
                origin_lat=float(obj["origin_lat"]),
                origin_lon=float(obj["origin_lon"]),
                rows=int(obj["rows"]),
                cols=int(obj["cols"]),
                cell_size_km=float(obj["cell_size_km"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParameterError):
                raise
            raise FormatError(f"bad grid specification: {exc}") from exc

    @classmethod
    def load(cls, path) -> "GridSpec":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"{path}: no such file")
        return cls.from_json(path.read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def cell_center(self, node: int) -> tuple[float, float]:
        """Approximate (lat, lon) of a cell center (equirectangular)."""
        row, col = node_rowcol(node, self)
        lat = self.origin_lat - (row + 0.5) * self.cell_size_km / KM_PER_DEG_LAT
        km_per_deg_lon = KM_PER_DEG_LAT * math.cos(math.radians(self.origin_lat))
        lon = self.origin_lon + (col + 0.5) * self.cell_size_km / km_per_deg_lon
        return lat, lon

    def node_at(self, lat: float, lon: float) -> int:
        """Node containing a geographic point."""
        km_per_deg_lon = KM_PER_DEG_LAT * math.cos(math.radians(self.origin_lat))
        row = math.floor((self.origin_lat - lat) * KM_PER_DEG_LAT / self.cell_size_km)
        col = math.floor((lon - self.origin_lon) * km_per_deg_lon / self.cell_size_km)
        return node_id(row, col, self)


def node_id(row: int, col: int, spec: GridSpec) -> int:
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise GridIndexError(f"cell ({row}, {col}) outside {spec.rows}x{spec.cols} grid")
    return row * spec.cols + col + 1


def node_rowcol(node: int, spec: GridSpec) -> tuple[int, int]:
    if not (1 <= node <= spec.n):
        raise GridIndexError(f"node id {node} outside 1..{spec.n}")
    return divmod(node - 1, spec.cols)


def node_distance(i: int, j: int, spec: GridSpec) -> float:
    """Planar distance in km between the centers of two cells."""
    ri, ci = node_rowcol(i, spec)
    rj, cj = node_rowcol(j, spec)
    return spec.cell_size_km * math.hypot(ri - rj, ci - cj)


def node_coords(spec: GridSpec, nodes=None) -> np.ndarray:
    """(len, 2) array of planar (y, x) km coordinates for 1-based node ids."""
    if nodes is None:
        idx = np.arange(spec.n)
    else:
        nodes = np.asarray(nodes, dtype=np.int64)
        if nodes.size and (nodes.min() < 1 or nodes.max() > spec.n):
            raise GridIndexError(f"node ids must lie in 1..{spec.n}")
        idx = nodes - 1
    rows, cols = np.divmod(idx, spec.cols)
    return np.stack([rows, cols], axis=-1).astype(np.float64) * spec.cell_size_km


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _check_kernel(sigma, r):
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not 0 < r < 1:
        raise ParameterError(f"threshold r must lie in (0, 1), got {r}")


def gaussian_weight(d, sigma: float, r: float = DEFAULT_THRESHOLD_R):
    """exp(-d^2/sigma^2), zeroed where it falls below ``r``.

    Works element-wise on arrays; returns a float for scalar input.
    """
    _check_kernel(sigma, r)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ParameterError("distances must be non-negative")
    w = np.exp(-(d * d) / (sigma * sigma))
    w = np.where(w >= r, w, 0.0)
    return float(w) if w.ndim == 0 else w


def normalize_adjacency(weights, self_loop_degree: bool = True) -> np.ndarray:
    """Symmetric renormalization D^-1/2 (A + I) D^-1/2.

    With ``self_loop_degree`` (default) the degree is taken from A + I, which
    keeps isolated nodes well defined. With ``self_loop_degree=False`` the
    degree is the row sum of A alone; nodes with zero degree then raise.
    """
    a = np.asarray(weights, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {a.shape}")
    if np.any(a < 0):
        raise ValidationError("adjacency has negative entries")
    if not np.array_equal(a, a.T):
        raise ValidationError("adjacency is not symmetric")
    if np.any(np.diag(a) != 0):
        raise ValidationError("adjacency diagonal must be zero")
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1) if self_loop_degree else a.sum(axis=1)
    if np.any(deg <= 0):
        raise ValidationError("zero-degree node: cannot normalize without self-loop degree")
    s = 1.0 / np.sqrt(deg)
    out = s[:, None] * a_hat * s[None, :]
    # elementwise product is symmetric up to rounding; force exact symmetry
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    weights: np.ndarray
    norm_adj: np.ndarray
    sigma: float
    threshold_r: float
    spec: GridSpec | None = field(default=None, repr=False)

    @cached_property
    def norm_adj_op(self):
        """Propagation operator: CSR when the graph is sparse, else dense."""
        return _as_operator(self.norm_adj)

    @cached_property
    def laplacian_op(self):
        """Combinatorial Laplacian D - A of the kernel weights (no self-loops)."""
        lap = np.diag(self.weights.sum(axis=1)) - self.weights
        return _as_operator(lap)

    def permuted(self, perm) -> "Graph":
        """Relabel nodes so that new node k is old node perm[k]."""
        perm = np.asarray(perm)
        return Graph(
            n=self.n,
            weights=self.weights[np.ix_(perm, perm)],
            norm_adj=self.norm_adj[np.ix_(perm, perm)],
            sigma=self.sigma,
            threshold_r=self.threshold_r,
        )

    def edges(self):
        """Nonzero (i, j, weight) triples over ordered pairs, 1-based ids."""
        ii, jj = np.nonzero(self.weights)
        for i, j in zip(ii, jj):
            yield int(i) + 1, int(j) + 1, float(self.weights[i, j])

    def write_edges_csv(self, path) -> int:
        count = 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "weight"])
            for i, j, v in self.edges():
                w.writerow([i, j, repr(v)])
                count += 1
        return count


def _as_operator(m: np.ndarray):
    if m.shape[0] >= 64 and np.count_nonzero(m) < 0.25 * m.size:
        return sp.csr_matrix(m)
    return m


def graph_from_weights(weights, sigma=float("nan"), r=float("nan"), self_loop_degree=True) -> Graph:
    weights = np.asarray(weights, dtype=np.float64)
    return Graph(
        n=weights.shape[0],
        weights=weights,
        norm_adj=normalize_adjacency(weights, self_loop_degree),
        sigma=sigma,
        threshold_r=r,
    )


def build_graph(
    spec: GridSpec,
    sigma: float = DEFAULT_SIGMA_KM,
    r: float = DEFAULT_THRESHOLD_R,
    self_loop_degree: bool = True,
) -> Graph:
    _check_kernel(sigma, r)
    xy = node_coords(spec)
    w = gaussian_weight(pairwise_distances(xy, xy), sigma, r)
    np.fill_diagonal(w, 0.0)
    return Graph(
        n=spec.n,
        weights=w,
        norm_adj=normalize_adjacency(w, self_loop_degree),
        sigma=sigma,
        threshold_r=r,
        spec=spec,
    )
