"""Hybrid temporal-convolution / graph-convolution AQI regressor.

Two temporal encoders (daily block, hourly block) each run a valid
convolution over time, ReLU, and a mean over the remaining steps. Their
outputs and the static block each pass through a stack of GCN layers
``relu(A_norm @ H @ W)``. The three branch outputs are mixed with learnable
scalars, concatenated per node with a cyclical time-of-day / day-of-week
code, and mapped to one value per node by a final linear GCN layer.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, ValidationError
from .features import TIME_ENC_DIM, FeatureSet, TimeContext, WindowBatch
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    c1: int = 8
    c2: int = 13
    c3: int = 3
    t1: int = 4
    t3: int = 24
    hidden: int = 32
    gcn_layers: int = 2
    kernel_k: int = 3
    time_enc_dim: int = TIME_ENC_DIM

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise ValidationError(f"ModelConfig.{f.name} must be >= 1")
        if self.t1 < self.kernel_k or self.t3 < self.kernel_k:
            raise ValidationError(f"t1={self.t1} and t3={self.t3} must be >= kernel_k={self.kernel_k}")
        if self.time_enc_dim != TIME_ENC_DIM:
            raise ValidationError(f"time_enc_dim is fixed at {TIME_ENC_DIM}")


@dataclass
class ModelParams:
    cnn1_kernel: Tensor  # (hidden, c1, K)
    cnn1_bias: Tensor  # (hidden,)
    cnn3_kernel: Tensor  # (hidden, c3, K)
    cnn3_bias: Tensor  # (hidden,)
    gcn_w1: list[Tensor]
    gcn_w2: list[Tensor]
    gcn_w3: list[Tensor]
    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    w_out: Tensor  # (hidden + 4, 1)

    def named(self) -> list[tuple[str, Tensor]]:
        """Parameters in canonical order with stable names."""
        out = [
            ("cnn1.kernel", self.cnn1_kernel),
            ("cnn1.bias", self.cnn1_bias),
            ("cnn3.kernel", self.cnn3_kernel),
            ("cnn3.bias", self.cnn3_bias),
        ]
        for branch in (1, 2, 3):
            for layer, w in enumerate(getattr(self, f"gcn_w{branch}")):
                out.append((f"gcn{branch}.{layer}", w))
        out += [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("w_out", self.w_out)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = param_shapes(cfg)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeError(f"parameter names mismatch (missing {missing}, unexpected {extra})")
        ts = {}
        for name, shape in expected.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"parameter {name} has shape {a.shape}, expected {shape}")
            ts[name] = Tensor(a.copy(), requires_grad=True, name=name)
        layers = range(cfg.gcn_layers)
        return cls(
            cnn1_kernel=ts["cnn1.kernel"],
            cnn1_bias=ts["cnn1.bias"],
            cnn3_kernel=ts["cnn3.kernel"],
            cnn3_bias=ts["cnn3.bias"],
            gcn_w1=[ts[f"gcn1.{i}"] for i in layers],
            gcn_w2=[ts[f"gcn2.{i}"] for i in layers],
            gcn_w3=[ts[f"gcn3.{i}"] for i in layers],
            alpha=ts["alpha"],
            beta=ts["beta"],
            gamma=ts["gamma"],
            w_out=ts["w_out"],
        )

    def copy(self, cfg: ModelConfig) -> "ModelParams":
        return ModelParams.from_arrays(cfg, self.arrays())


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, k = cfg.hidden, cfg.kernel_k
    shapes = {
        "cnn1.kernel": (h, cfg.c1, k),
        "cnn1.bias": (h,),
        "cnn3.kernel": (h, cfg.c3, k),
        "cnn3.bias": (h,),
    }
    for branch, first in ((1, h), (2, cfg.c2), (3, h)):
        for layer in range(cfg.gcn_layers):
            shapes[f"gcn{branch}.{layer}"] = (first if layer == 0 else h, h)
    shapes.update(alpha=(), beta=(), gamma=(), w_out=(h + cfg.time_enc_dim, 1))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and kernels, zero biases, fusion scalars 1/3."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        elif name in ("alpha", "beta", "gamma"):
            arrays[name] = np.array(1.0 / 3.0)
        else:
            if len(shape) == 3:  # conv kernel (out, in, K)
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams.from_arrays(cfg, arrays)


# ---- building blocks ---------------------------------------------------------


def temporal_encode(x_k, kernel, bias) -> Tensor:
    """Encode one (C, T, N) window into per-node (N, hidden) vectors.

    The same kernel is applied at every node.
    """
    x = np.asarray(x_k.data if isinstance(x_k, Tensor) else x_k, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"temporal_encode expects (C, T, N), got {x.shape}")
    conv = T.conv1d_time(np.transpose(x, (2, 0, 1)), kernel, bias)  # (N, hidden, T')
    return T.mean(T.relu(conv), axis=-1)


def temporal_encode_series(series: np.ndarray, kernel, bias, ends, window: int) -> Tensor:
    """``temporal_encode`` for every window ending at ``ends`` of a (C, T, N) series.

    Returns (len(ends), N, hidden). Convolution outputs are computed once and
    shared between overlapping windows.
    """
    k = kernel.shape[-1]
    ends = np.asarray(ends, dtype=np.intp)
    if ends.size == 0 or ends.min() < window - 1 or ends.max() >= series.shape[1]:
        raise ShapeError(f"windows of length {window} ending at {ends.min()}..{ends.max()} exceed series of {series.shape[1]}")
    # restrict to the span actually used
    lo, hi = ends.min() - window + 1, ends.max() + 1
    x = np.ascontiguousarray(np.transpose(series[:, lo:hi, :], (2, 0, 1)))  # (N, C, T)
    h = T.relu(T.conv1d_time(x, kernel, bias))  # (N, hidden, T')
    m = T.window_mean(h, ends - window + 1 - lo, window - k + 1)  # (N, hidden, B)
    return T.transpose(m, (2, 0, 1))


def gcn_branch(h0, norm_adj, weights) -> Tensor:
    """Stack of ``relu(A_norm @ H @ W)`` layers; H may carry a leading batch axis."""
    h = T.as_tensor(h0)
    for w in weights:
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"GCN weight {w.shape} does not accept {h.shape[-1]} input features")
        h = T.relu(T.propagate(norm_adj, T.matmul(h, w)))
    return h


def fuse(h1, h2, h3, alpha, beta, gamma) -> Tensor:
    """alpha*h1 + beta*h2 + gamma*h3 (broadcasting over a batch axis)."""
    h1, h2, h3 = T.as_tensor(h1), T.as_tensor(h2), T.as_tensor(h3)
    if h1.shape[-2:] != h2.shape[-2:] or h1.shape[-2:] != h3.shape[-2:]:
        raise ShapeError(f"fusion inputs differ in shape: {h1.shape}, {h2.shape}, {h3.shape}")
    return T.mul(alpha, h1) + T.mul(beta, h2) + T.mul(gamma, h3)


def _operator(graph):
    return getattr(graph, "norm_adj_op", graph)


def forward_batch(batch: WindowBatch, graph, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Predictions for every window in the batch, shape (B, N)."""
    op = _operator(graph)
    n = batch.n
    if op.shape != (n, n):
        raise ShapeError(f"graph has {op.shape[0]} nodes, features have {n}")
    if batch.x1_series.shape[0] != cfg.c1 or batch.x3_series.shape[0] != cfg.c3 or batch.x2.shape[0] != cfg.c2:
        raise ShapeError(
            f"feature channels ({batch.x1_series.shape[0]}, {batch.x2.shape[0]}, {batch.x3_series.shape[0]})"
            f" do not match config ({cfg.c1}, {cfg.c2}, {cfg.c3})"
        )

    h1 = temporal_encode_series(batch.x1_series, params.cnn1_kernel, params.cnn1_bias, batch.day_end, cfg.t1)
    h1 = T.take(gcn_branch(h1, op, params.gcn_w1), batch.ts_day, axis=0)
    h2 = gcn_branch(np.ascontiguousarray(batch.x2.T), op, params.gcn_w2)
    h3 = temporal_encode_series(batch.x3_series, params.cnn3_kernel, params.cnn3_bias, batch.hour_end, cfg.t3)
    h3 = gcn_branch(h3, op, params.gcn_w3)

    fused = fuse(h1, h2, h3, params.alpha, params.beta, params.gamma)
    tenc = np.broadcast_to(batch.time_enc[:, None, :], (batch.b, n, TIME_ENC_DIM))
    z = T.concat([fused, tenc], axis=-1)
    y = T.propagate(op, T.matmul(z, params.w_out))  # (B, N, 1)
    return T.reshape(y, (batch.b, n))


def forward(features: FeatureSet, graph, params: ModelParams, tctx: TimeContext, cfg: ModelConfig | None = None) -> Tensor:
    """Prediction for a single window, shape (N, 1)."""
    if cfg is None:
        cfg = config_from_params(params, features)
    if features.x1.shape[1] != cfg.t1 or features.x3.shape[1] != cfg.t3:
        raise ShapeError(f"window lengths ({features.x1.shape[1]}, {features.x3.shape[1]}) != config ({cfg.t1}, {cfg.t3})")
    y = forward_batch(WindowBatch.from_features(features, tctx), graph, params, cfg)
    return T.reshape(y, (features.n, 1))


def config_from_params(params: ModelParams, features: FeatureSet) -> ModelConfig:
    hidden, c1, k = params.cnn1_kernel.shape
    return ModelConfig(
        c1=c1,
        c2=params.gcn_w2[0].shape[0],
        c3=params.cnn3_kernel.shape[1],
        t1=features.x1.shape[1],
        t3=features.x3.shape[1],
        hidden=hidden,
        gcn_layers=len(params.gcn_w1),
        kernel_k=k,
    )


# ---- checkpoint -----------------------------------------------------------------
#
# Layout (all little-endian):
#   magic b"AQGCNCKP", u32 version
#   u32 count of config fields, then that many int64 values in ModelConfig order
#   u32 block count; per block: u16 name length, utf-8 name, u8 ndim,
#   ndim x u32 dims, prod(dims) float64 values

MAGIC = b"AQGCNCKP"
VERSION = 1
_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def save_params(params: ModelParams, cfg: ModelConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_vals = asdict(cfg)
    buf.write(struct.pack("<I", len(_CONFIG_FIELDS)))
    buf.write(struct.pack(f"<{len(_CONFIG_FIELDS)}q", *(cfg_vals[f] for f in _CONFIG_FIELDS)))
    named = params.named()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        if t.ndim:
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(data: bytes) -> tuple[ModelParams, ModelConfig]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_cfg,) = r.unpack("<I")
    if n_cfg != len(_CONFIG_FIELDS):
        raise FormatError(f"config header has {n_cfg} fields, expected {len(_CONFIG_FIELDS)}")
    vals = r.unpack(f"<{n_cfg}q")
    try:
        cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, vals)))
    except ValidationError as exc:
        raise FormatError(f"invalid config header: {exc}") from exc
    (n_blocks,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FormatError("trailing bytes after last weight block")
    try:
        params = ModelParams.from_arrays(cfg, arrays)
    except ShapeError as exc:
        raise FormatError(f"weights do not match config header: {exc}") from exc
    return params, cfg
