import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropgrasp.detgeom import BBox, GridTarget, encode_grid
from cropgrasp.errors import ConfigInvalid, EmptyDataset, MissingGradient, ShapeMismatch
from cropgrasp.optim import (
    AdamState,
    EpochReport,
    GraspLossParams,
    YoloLossParams,
    adam_step,
    fit,
    grasp_loss,
    is_non_increasing,
    smoothed,
    train_epoch,
    yolo_loss,
)
from cropgrasp.tensor import Tensor, float64_mode, grad_check, mul, square, sub, tsum


def yolo_oracle(pred, target: GridTarget, lc, lnoobj, mode):
    """Plain scalar loops over cells and slots."""
    S, B, C = target.S, target.B, target.C
    t = target.values
    total = 0.0
    for r in range(S):
        for c in range(S):
            cell_has_obj = any(t[r, c, 5 * j + 4] > 0 for j in range(B))
            for j in range(B):
                px, py, pw, ph, pc = (float(v) for v in pred[r, c, 5 * j:5 * j + 5])
                tx, ty, tw, th, tc = (float(v) for v in t[r, c, 5 * j:5 * j + 5])
                responsible = tc > 0
                sq = lambda v: math.sqrt(max(v, 0.0))
                if responsible:
                    total += lc * ((tx - px) ** 2 + (ty - py) ** 2)
                    if mode == "printed":
                        total += lc * ((sq(tw) - sq(pw)) ** 2 + (th - ph) ** 2)
                        total += (tc - pc) ** 2
                        total += lc * (tc - pc) ** 2
                    else:
                        total += lc * ((sq(tw) - sq(pw)) ** 2 + (sq(th) - sq(ph)) ** 2)
                        total += (tc - pc) ** 2
                elif mode == "canonical":
                    total += lnoobj * (tc - pc) ** 2
            if cell_has_obj:
                for k in range(C):
                    total += (float(t[r, c, B * 5 + k]) - float(pred[r, c, B * 5 + k])) ** 2
    return total


def grasp_oracle(pred, target, weights, lam, mode):
    total = 0.0
    for p_row, t_row in zip(pred, target):
        for a, b in zip(p_row, t_row):
            total += (a - b) ** 2
    for w in weights:
        for v in np.asarray(w).ravel():
            total += lam * (v * v if mode == "squared" else v)
    return total


def random_target(rng, S, B, C):
    objs = []
    for _ in range(int(rng.integers(0, S * S + 1))):
        objs.append((BBox(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.05, 1)),
                     int(rng.integers(C))))
    return encode_grid(objs, S, B, C)


def single_cell(x=0.5, conf=1.0):
    target = encode_grid([(BBox(0.5, 0.5, 0.25, 0.36), 0)], 1, 1, 1)
    pred = target.values.copy()
    pred[0, 0, 0] = x
    pred[0, 0, 4] = conf
    return pred, target


# ---------------------------------------------------------------- yolo loss


@pytest.mark.parametrize("mode", ["printed", "canonical"])
def test_yolo_loss_zero_at_target(mode):
    t = encode_grid([(BBox(0.3, 0.6, 0.2, 0.1), 1), (BBox(0.8, 0.2, 0.3, 0.3), 0)], 3, 2, 2)
    with float64_mode():
        assert yolo_loss(Tensor(t.values), t, YoloLossParams(mode=mode)).item() == 0.0


def test_yolo_coordinate_worked_example():
    pred, target = single_cell(x=0.6)
    with float64_mode():
        loss = yolo_loss(Tensor(pred), target, YoloLossParams(lambda_coord=5.0, mode="printed")).item()
    assert loss == pytest.approx(0.05, abs=1e-12)
    assert yolo_oracle(pred, target, 5.0, 0.5, "printed") == pytest.approx(0.05, abs=1e-12)


def test_yolo_confidence_worked_example_printed():
    pred, target = single_cell(conf=0.7)
    with float64_mode():
        loss = yolo_loss(Tensor(pred), target, YoloLossParams(lambda_coord=5.0, mode="printed")).item()
    assert loss == pytest.approx(0.54, abs=1e-12)
    with float64_mode():
        canon = yolo_loss(Tensor(pred), target, YoloLossParams(mode="canonical")).item()
    assert canon == pytest.approx(0.09, abs=1e-12)


def test_printed_mode_ignores_empty_cells_canonical_does_not():
    t = encode_grid([], 2, 1, 1)
    pred = np.zeros((2, 2, 6))
    pred[..., 4] = 0.4
    with float64_mode():
        assert yolo_loss(Tensor(pred), t, YoloLossParams(mode="printed")).item() == 0.0
        assert yolo_loss(Tensor(pred), t, YoloLossParams(mode="canonical")).item() == pytest.approx(4 * 0.5 * 0.16)


def test_yolo_shape_mismatch_and_bad_mode():
    t = encode_grid([], 2, 1, 1)
    with pytest.raises(ShapeMismatch):
        yolo_loss(Tensor(np.zeros((3, 3, 6))), t)
    with pytest.raises(ConfigInvalid):
        YoloLossParams(mode="v3")


@pytest.mark.parametrize("mode", ["printed", "canonical"])
def test_yolo_loss_matches_scalar_oracle(mode):
    rng = np.random.default_rng(11)
    for _ in range(100):
        S, B, C = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        target = random_target(rng, S, B, C)
        pred = rng.uniform(-0.2, 1.2, size=target.values.shape)
        lc, ln = float(rng.uniform(0, 6)), float(rng.uniform(0, 1))
        with float64_mode():
            got = yolo_loss(Tensor(pred), target, YoloLossParams(lc, ln, mode)).item()
        assert got == pytest.approx(yolo_oracle(pred, target, lc, ln, mode), abs=1e-6)


def test_yolo_batch_mean_is_average_of_singles():
    rng = np.random.default_rng(5)
    targets = [random_target(rng, 3, 2, 3) for _ in range(4)]
    preds = rng.uniform(0, 1, size=(4, 3, 3, 13))
    params = YoloLossParams(mode="canonical")
    with float64_mode():
        batch = yolo_loss(Tensor(preds), targets, params, reduction="mean").item()
        singles = [yolo_loss(Tensor(p), t, params).item() for p, t in zip(preds, targets)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_negative_size_is_clamped_and_counted():
    pred, target = single_cell()
    pred[0, 0, 2] = -0.1
    p = Tensor(pred, requires_grad=True)
    stats = {}
    loss = yolo_loss(p, target, YoloLossParams(mode="canonical"), stats=stats)
    assert stats["clamped_sqrt"] == 1
    assert loss.item() == pytest.approx(5.0 * 0.25, rel=1e-6)
    loss.backward()
    assert p.grad[0, 0, 2] == 0.0
    assert np.isfinite(p.grad).all()


@pytest.mark.parametrize("mode", ["printed", "canonical"])
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_yolo_gradient(mode, seed):
    rng = np.random.default_rng(seed)
    S, B, C = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    target = random_target(rng, S, B, C)
    p = Tensor(rng.uniform(0.05, 0.95, size=target.values.shape), requires_grad=True)
    rep = grad_check(lambda: yolo_loss(p, target, YoloLossParams(mode=mode)), [p])
    assert rep.passed(1e-4), rep


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["printed", "canonical"]))
def test_yolo_loss_non_negative(seed, mode):
    rng = np.random.default_rng(seed)
    target = random_target(rng, 3, 2, 3)
    pred = rng.uniform(-1, 2, size=target.values.shape)
    assert yolo_loss(Tensor(pred), target, YoloLossParams(mode=mode)).item() >= 0.0


# ---------------------------------------------------------------- grasp loss


def test_grasp_loss_examples():
    t = np.array([[0.2, 0.3, 0.6, 0.7]])
    with float64_mode():
        assert grasp_loss(Tensor(t), t).item() == 0.0
        assert grasp_loss(Tensor(t + 0.1), t).item() == pytest.approx(0.04, abs=1e-12)
        w = [Tensor([1.0, 0.0]), Tensor([[1.0]])]
        assert grasp_loss(Tensor(t), t, w, GraspLossParams(0.01, "squared")).item() == pytest.approx(0.02)


def test_grasp_loss_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        pred, target = rng.random((n, 4)), rng.random((n, 4))
        weights = [rng.normal(size=tuple(rng.integers(1, 4, size=int(rng.integers(1, 3))))) for _ in range(3)]
        lam = float(rng.uniform(0, 0.1))
        mode = ["squared", "printed_linear"][int(rng.integers(2))]
        with float64_mode():
            got = grasp_loss(Tensor(pred), target, [Tensor(w) for w in weights], GraspLossParams(lam, mode)).item()
        assert got == pytest.approx(grasp_oracle(pred, target, weights, lam, mode), abs=1e-6)


def test_grasp_loss_shape_and_params():
    with pytest.raises(ShapeMismatch):
        grasp_loss(Tensor(np.zeros((2, 4))), np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        grasp_loss(Tensor(np.zeros(3)), np.zeros(3))
    with pytest.raises(ConfigInvalid):
        GraspLossParams(reg_mode="l1")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_grasp_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.random((3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=5), requires_grad=True)
    t = rng.random((3, 4))
    rep = grad_check(lambda: grasp_loss(p, t, [w], GraspLossParams(0.05)), [p, w])
    assert rep.passed(1e-4), rep


# ---------------------------------------------------------------- adam


def adam_oracle(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_zero_gradient_is_noop():
    p = Tensor([1.0, -2.0], requires_grad=True)
    adam_step([p], AdamState())
    assert p.data.tolist() == [1.0, -2.0]


@pytest.mark.parametrize("g", [1e-4, 0.3, 50.0])
def test_adam_first_step_is_lr(g):
    with float64_mode():
        p = Tensor([1.0], requires_grad=True)
    p.grad[:] = g
    adam_step([p], AdamState(lr=0.1))
    assert 1.0 - p.data[0] == pytest.approx(0.1, rel=1e-3)


def test_adam_matches_closed_loop_oracle():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=20)
    with float64_mode():
        p = Tensor([0.5], requires_grad=True)
    state = AdamState(lr=0.01)
    for g in grads:
        p.grad[:] = g
        adam_step([p], state)
    assert state.t == 20
    assert p.data[0] == pytest.approx(adam_oracle(0.5, grads, 0.01), abs=1e-12)


def test_adam_identical_params_identical_trajectories():
    a = Tensor([0.3, 0.3], requires_grad=True)
    state = AdamState()
    for k in range(5):
        a.grad[:] = [k + 0.5, k + 0.5]
        adam_step([a], state)
    assert a.data[0] == a.data[1]


def test_adam_zero_lr_is_identity():
    p = Tensor([0.7], requires_grad=True)
    p.grad[:] = 3.0
    adam_step([p], AdamState(lr=0.0))
    assert p.data.tolist() == [np.float32(0.7)]


def test_adam_missing_gradient():
    p = Tensor([1.0])
    with pytest.raises(MissingGradient):
        adam_step([p], AdamState())


# ---------------------------------------------------------------- training driver


class Toy:
    """y = w * x, one scalar weight."""

    def __init__(self, w=0.0):
        self.w = Tensor([w], requires_grad=True)

    def parameters(self):
        return [self.w]


def toy_loss(model, batch):
    xs = np.array([b[0] for b in batch])
    ys = np.array([b[1] for b in batch])
    return tsum(square(sub(mul(model.w, Tensor(xs)), Tensor(ys)))) / float(len(batch))


def test_train_epoch_empty_split():
    with pytest.raises(EmptyDataset):
        train_epoch(Toy(), [], toy_loss, AdamState(), 2, 0)


def test_train_epoch_zero_lr():
    model = Toy(0.5)
    data = [(1.0, 2.0), (2.0, 1.0), (-1.0, 0.5)]
    state = AdamState(lr=0.0)
    r1 = train_epoch(model, data, toy_loss, state, 2, 0)
    r2 = train_epoch(model, data, toy_loss, state, 2, 0)
    assert model.w.data.tolist() == [0.5]
    assert r1.mean_loss == r2.mean_loss


def test_single_sample_quadratic_decreases():
    model = Toy(0.0)
    reps = fit(model, [(1.0, 3.0)], toy_loss, AdamState(lr=0.05), 50, 1, 0)
    losses = [r.mean_loss for r in reps]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_same_seed_bit_identical_report():
    data = [(float(x), 2.0 * x + 1.0) for x in np.linspace(-1, 1, 9)]
    runs = []
    for _ in range(2):
        reps = fit(Toy(0.1), data, toy_loss, AdamState(lr=0.01), 3, 4, seed=42)
        runs.append([r.to_json() for r in reps])
    assert runs[0] == runs[1]


def test_epoch_report_json():
    rep = EpochReport(3, 0.5, [0.4, 0.6], 2)
    assert json.loads(rep.to_json()) == {"epoch": 3, "mean_loss": 0.5, "batches": [0.4, 0.6], "clamped_sqrt_count": 2}


def test_smoothing_helpers():
    assert smoothed([5, 3, 4, 2, 1, 0, 1], window=3) == [4.0, 1.0]
    assert is_non_increasing([3, 3, 2])
    assert not is_non_increasing([3, 2, 2.5])
