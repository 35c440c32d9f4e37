"""Semi-supervised loss (masked MSE + graph smoothness) and the Adam loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import DivergenceError, EmptyTrainingSetError, NumericError, ShapeError, ValidationError
from .features import WindowBatch
from .model import ModelConfig, ModelParams, forward_batch, init_params

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lam: float = 1e-6
    epochs: int = 100
    seed: int = 0
    labeled_nodes: frozenset = frozenset()  # 1-based ids of sensor nodes
    test_nodes: frozenset = frozenset()
    per_timestamp: bool = False

    def __post_init__(self):
        self.labeled_nodes = frozenset(int(v) for v in self.labeled_nodes)
        self.test_nodes = frozenset(int(v) for v in self.test_nodes)
        if not self.test_nodes <= self.labeled_nodes:
            raise ValidationError(f"test nodes {sorted(self.test_nodes - self.labeled_nodes)} are not sensor nodes")
        if not self.train_nodes:
            raise EmptyTrainingSetError("no sensor nodes left for training after holding out the test nodes")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")

    @property
    def train_nodes(self) -> frozenset:
        return self.labeled_nodes - self.test_nodes


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def smoothness_loss(y_hat, weights) -> T.Tensor:
    """Sum over all ordered node pairs of a_ij * (y_i - y_j)^2.

    Evaluated as 2 * y^T (D - A) y. ``weights`` may be a Graph (its
    Laplacian operator is reused), a dense A, or a sparse A. A (B, N) input
    sums the per-row values.
    """
    lap = getattr(weights, "laplacian_op", None)
    if lap is None:
        a = weights
        deg = np.asarray(a.sum(axis=1)).ravel()
        lap = (np.diag(deg) - a) if isinstance(a, np.ndarray) else (sp.diags(deg) - a).tocsr()
    y = T.as_tensor(y_hat)
    if y.ndim == 2 and y.shape[1] == 1 and y.shape[0] == lap.shape[0]:
        y = T.reshape(y, (lap.shape[0],))
    # the value is shift-invariant; anchoring each row at its first entry makes
    # constant fields exactly zero despite rounding in the Laplacian row sums
    y = T.sub(y, T.take(y, [0], axis=y.ndim - 1))
    return T.scale(T.quad_form(y, lap), 2.0)


def total_loss(y_hat, y_true, train_mask, weights, lam: float):
    """Masked MSE plus ``lam`` times the smoothness penalty.

    For a (B, N) batch the penalty is averaged over the B rows, matching the
    MSE which averages over all labeled entries. Returns (total, sup, reg).
    """
    y_hat = T.as_tensor(y_hat)
    sup = T.mse_masked(y_hat, y_true, train_mask)
    reg = smoothness_loss(y_hat, weights)
    if y_hat.ndim == 2 and y_hat.shape[1] != 1:
        reg = T.scale(reg, 1.0 / y_hat.shape[0])
    total = sup + T.scale(reg, lam) if lam else sup
    return total, sup, reg


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new arrays and the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name} at step {state.t + 1}")
    t = state.t + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = ADAM_BETA1 * state.m.get(name, np.zeros_like(p)) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, np.zeros_like(p)) + (1.0 - ADAM_BETA2) * (g * g)
        m_new[name], v_new[name] = m, v
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class TrainResult:
    params: ModelParams
    history: list  # (epoch, l_sup, l_reg, l_total)
    state: AdamState

    def write_history_csv(self, path) -> None:
        write_history_csv(self.history, path)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_sup", "l_reg", "l_total"])
        for epoch, sup, reg, tot in history:
            w.writerow([epoch, repr(sup), repr(reg), repr(tot)])


def train_mask_for(y_true: np.ndarray, train_nodes) -> np.ndarray:
    """Boolean (B, N) mask of finite labels at the given 1-based nodes."""
    mask = np.zeros(y_true.shape, dtype=bool)
    cols = np.array(sorted(train_nodes), dtype=np.intp) - 1
    mask[:, cols] = np.isfinite(y_true[:, cols])
    return mask


def _loss_and_grads(batch, graph, params, model_cfg, y_true, mask, lam):
    with T.Tape() as tape:
        y_hat = forward_batch(batch, graph, params, model_cfg)
        total, sup, reg = total_loss(y_hat, y_true, mask, graph, lam)
    vals = (sup.item(), reg.item(), total.item())
    if not np.isfinite(vals[2]):
        return vals, None
    grads = T.backward(total, tape, params.tensors())
    return vals, {name: grads[t] for name, t in params.named()}


def train(
    batch: WindowBatch,
    graph,
    y_true: np.ndarray,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    params: ModelParams | None = None,
) -> TrainResult:
    """Minimize the total loss with Adam.

    ``y_true`` is (B, N) with NaN wherever no label exists; only the
    training sensor nodes contribute to the supervised term, while the
    smoothness penalty covers every node. Full-batch mode takes one Adam
    step per epoch on the loss averaged over all windows; per-timestamp mode
    takes one step per window.

    The loss recorded for an epoch is the loss at the parameters entering
    that epoch (the mean over windows in per-timestamp mode).
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_true.shape != (batch.b, batch.n):
        raise ShapeError(f"labels have shape {y_true.shape}, expected {(batch.b, batch.n)}")
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    mask = train_mask_for(y_true, cfg.train_nodes)
    if not mask.any():
        raise EmptyTrainingSetError("no finite labels at training nodes")
    y_filled = np.where(mask, y_true, 0.0)

    state = AdamState()
    history = []
    arrays = params.arrays()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.per_timestamp:
            rows = [b for b in range(batch.b) if mask[b].any()]
            acc = np.zeros(3)
            for b in rows:
                sub = batch.subset([b])
                vals, grads = _loss_and_grads(sub, graph, params, model_cfg, y_filled[b : b + 1], mask[b : b + 1], cfg.lam)
                if grads is None:
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", params.copy(model_cfg), history)
                acc += vals
                arrays, state = _checked_step(arrays, grads, state, cfg.lr, epoch, params, model_cfg, history)
                params = ModelParams.from_arrays(model_cfg, arrays)
            sup, reg, tot = acc / len(rows)
        else:
            (sup, reg, tot), grads = _loss_and_grads(batch, graph, params, model_cfg, y_filled, mask, cfg.lam)
            if grads is None:
                raise DivergenceError(f"non-finite loss at epoch {epoch}", params.copy(model_cfg), history)
            arrays, state = _checked_step(arrays, grads, state, cfg.lr, epoch, params, model_cfg, history)
            params = ModelParams.from_arrays(model_cfg, arrays)
        history.append((epoch, float(sup), float(reg), float(tot)))
        log.debug("epoch %d: sup=%.6g reg=%.6g total=%.6g", epoch, sup, reg, tot)
    return TrainResult(params, history, state)


def _checked_step(arrays, grads, state, lr, epoch, params, model_cfg, history):
    try:
        new_arrays, state = adam_step(arrays, grads, state, lr)
    except NumericError as exc:
        raise DivergenceError(f"epoch {epoch}: {exc}", params.copy(model_cfg), history) from exc
    if not all(np.all(np.isfinite(a)) for a in new_arrays.values()):
        raise DivergenceError(f"non-finite parameters after epoch {epoch}", params.copy(model_cfg), history)
    return new_arrays, state
