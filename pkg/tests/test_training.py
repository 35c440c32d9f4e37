import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from aqmap import tensor as T
from aqmap.errors import DivergenceError, EmptyTrainingSetError, NumericError, ShapeError, ValidationError
from aqmap.features import WindowBatch
from aqmap.grid import graph_from_weights
from aqmap.model import forward_batch, init_params
from aqmap.tensor import Tape, Tensor, backward
from aqmap.training import (
    ADAM_EPS,
    AdamState,
    TrainConfig,
    adam_step,
    smoothness_loss,
    total_loss,
    train,
    write_history_csv,
)

from conftest import assert_grad_close, central_diff


def double_sum(a, y):
    n = len(y)
    return sum(a[i, j] * (y[i] - y[j]) ** 2 for i in range(n) for j in range(n))


def random_graph(rng, n, density=0.5):
    a = rng.random((n, n)) * (rng.random((n, n)) < density)
    a = np.triu(a, 1)
    return a + a.T


def test_smoothness_examples():
    a = np.array([[0, 0.5], [0.5, 0]])
    assert smoothness_loss(np.array([0.0, 1.0]), a).item() == pytest.approx(1.0, abs=1e-15)
    assert smoothness_loss(np.full(2, 3.7), a).item() == 0.0
    rng = np.random.default_rng(8)
    a8, y8 = random_graph(rng, 8), rng.normal(size=8)
    assert abs(smoothness_loss(y8, a8).item() - double_sum(a8, y8)) <= 1e-10


def test_smoothness_accepts_sparse_graph_and_column():
    rng = np.random.default_rng(1)
    a, y = random_graph(rng, 10), rng.normal(size=10)
    ref = double_sum(a, y)
    assert smoothness_loss(y, sp.csr_matrix(a)).item() == pytest.approx(ref, abs=1e-10)
    assert smoothness_loss(y.reshape(-1, 1), graph_from_weights(a)).item() == pytest.approx(ref, abs=1e-10)


def test_smoothness_zero_iff_constant_per_component():
    # two components {0,1,2} and {3,4}
    a = np.zeros((5, 5))
    for i, j in [(0, 1), (1, 2), (3, 4)]:
        a[i, j] = a[j, i] = 0.8
    assert smoothness_loss(np.array([2.0, 2.0, 2.0, -1.0, -1.0]), a).item() == 0.0
    assert smoothness_loss(np.array([2.0, 2.0, 2.1, -1.0, -1.0]), a).item() > 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 20))
def test_smoothness_nonnegative_and_matches_double_sum(seed, n):
    rng = np.random.default_rng(seed)
    a, y = random_graph(rng, n), rng.normal(scale=3, size=n)
    v = smoothness_loss(y, a).item()
    assert v >= -1e-12
    assert abs(v - double_sum(a, y)) <= 1e-10 * max(1.0, abs(v))


def test_smoothness_gradient():
    rng = np.random.default_rng(3)
    a = random_graph(rng, 6)
    y = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    with Tape() as tape:
        loss = smoothness_loss(y, a)
    g = backward(loss, tape, [y])[y]
    assert_grad_close(g, central_diff(lambda: smoothness_loss(y, a).item(), y.data))


def test_total_loss_examples():
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 0.5
    pred, truth, mask = np.array([1.0, 2.0, 5.0]), np.array([1.0, 2.0, 1.0]), np.array([False, False, True])
    tot, sup, reg = total_loss(pred, truth, mask, a, 0.1)
    assert sup.item() == 16.0 and reg.item() == pytest.approx(1.0)
    assert tot.item() == pytest.approx(16.1, abs=1e-12)
    tot0, sup0, _ = total_loss(pred, truth, mask, a, 0.0)
    assert tot0.item() == sup0.item() == 16.0
    flat = np.full(3, 4.0)
    assert total_loss(flat, flat, np.ones(3, bool), a, 10.0)[0].item() == 0.0


def test_total_loss_batch_averages_penalty():
    a = np.array([[0, 0.5], [0.5, 0]])
    y = np.array([[0.0, 1.0], [0.0, 3.0]])
    _, _, reg = total_loss(y, y, np.ones((2, 2), bool), a, 1.0)
    assert reg.item() == pytest.approx((1.0 + 9.0) / 2)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(new["w"], p["w"]) and state.t == 1


def test_adam_first_step_magnitude():
    g = np.array([0.3, -5.0, 1e-3])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), 0.01)
    expected = -0.01 * g / (np.abs(g) + ADAM_EPS)
    assert np.allclose(new["w"], expected, rtol=1e-12)
    assert np.allclose(np.abs(new["w"]), 0.01, rtol=1e-4)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = rng.normal(size=4)
    grads = rng.normal(size=(5, 4))
    m = v = np.zeros(4)
    ref = p.copy()
    params, state = {"w": p.copy()}, AdamState()
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        params, state = adam_step(params, {"w": g}, state, 0.05)
    assert np.allclose(params["w"], ref, atol=1e-15)


def test_adam_elementwise_identical_histories():
    params, state = {"a": np.array([0.5]), "b": np.array([0.5])}, AdamState()
    for g in (0.2, -1.0, 3.0):
        params, state = adam_step(params, {"a": np.array([g]), "b": np.array([g])}, state, 0.1)
    assert np.array_equal(params["a"], params["b"])


def test_adam_rejects_non_finite():
    with pytest.raises(NumericError):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, AdamState(), 0.1)


# ---- train --------------------------------------------------------------------------


def toy_problem(small_model, labeled="all"):
    spec, graph, cfg, feats, params, tctx = small_model
    batch = WindowBatch.from_features(feats, tctx)
    y = np.linspace(-1.0, 1.0, 6)[None, :]  # linear field over the nodes
    nodes = frozenset(range(1, 7)) if labeled == "all" else frozenset(labeled)
    return batch, graph, cfg, y, nodes


def test_train_loss_decreases_first_epochs(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model)
    res = train(batch, graph, y, TrainConfig(lr=3e-3, lam=0.0, epochs=10, labeled_nodes=nodes), cfg)
    totals = [h[3] for h in res.history]
    assert all(b < a for a, b in zip(totals, totals[1:]))
    assert [h[0] for h in res.history] == list(range(1, 11))


def test_train_zero_epochs_returns_init(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model)
    res = train(batch, graph, y, TrainConfig(epochs=0, seed=5, labeled_nodes=nodes), cfg)
    assert res.history == []
    for k, v in init_params(cfg, 5).arrays().items():
        assert np.array_equal(res.params.arrays()[k], v)


def test_large_lambda_smooths_field(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model, labeled=[1, 6])
    fields = {}
    for lam in (0.0, 1e3):
        res = train(batch, graph, y, TrainConfig(lr=1e-2, lam=lam, epochs=30, labeled_nodes=nodes), cfg)
        fields[lam] = forward_batch(batch, graph, res.params, cfg).data
    s0 = smoothness_loss(fields[0.0], graph).item()
    s1 = smoothness_loss(fields[1e3], graph).item()
    assert s1 < s0


def test_training_is_deterministic(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model)
    tc = TrainConfig(lr=1e-2, lam=1e-3, epochs=5, seed=2, labeled_nodes=nodes)
    a, b = train(batch, graph, y, tc, cfg), train(batch, graph, y, tc, cfg)
    assert a.history == b.history


def test_per_timestamp_mode_runs(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model)
    res = train(batch, graph, y, TrainConfig(lr=1e-2, lam=0.0, epochs=3, labeled_nodes=nodes, per_timestamp=True), cfg)
    assert len(res.history) == 3 and res.state.t == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_last_good(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model)
    with pytest.raises(DivergenceError) as exc:
        train(batch, graph, y * 1e300, TrainConfig(lr=1e-2, lam=0.0, epochs=5, labeled_nodes=nodes), cfg)
    assert exc.value.last_good is not None
    assert exc.value.error_class == "divergence" and exc.value.exit_code == 4


def test_train_config_validation():
    with pytest.raises(EmptyTrainingSetError):
        TrainConfig(labeled_nodes={1, 2}, test_nodes={1, 2})
    with pytest.raises(ValidationError):
        TrainConfig(labeled_nodes={1, 2}, test_nodes={3})
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0, labeled_nodes={1})
    with pytest.raises(ValidationError):
        TrainConfig(lam=-1.0, labeled_nodes={1})


def test_train_label_shape_checked(small_model):
    batch, graph, cfg, y, nodes = toy_problem(small_model)
    with pytest.raises(ShapeError):
        train(batch, graph, y[:, :5], TrainConfig(epochs=1, labeled_nodes=nodes), cfg)


def test_history_csv(tmp_path):
    write_history_csv([(1, 0.5, 0.25, 0.75)], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text() == "epoch,l_sup,l_reg,l_total\n1,0.5,0.25,0.75\n"
