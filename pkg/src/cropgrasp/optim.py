"""Training losses, the Adam optimizer and the epoch driver."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .detgeom import GridTarget
from .errors import ConfigInvalid, EmptyDataset, MissingGradient, ShapeMismatch
from .tensor import Tensor, backward, mul, sqrt_clamped, square, sub, tsum

logger = logging.getLogger(__name__)


@dataclass
class YoloLossParams:
    """Weights of the grid detection loss.

    ``printed`` reproduces the published five-term equation literally (no
    no-object confidence term, linear h). ``canonical`` swaps the fourth
    term for lambda_noobj over empty slots and takes sqrt of h too.
    """

    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    mode: Literal["printed", "canonical"] = "printed"

    def __post_init__(self):
        if self.mode not in ("printed", "canonical"):
            raise ConfigInvalid(f"unknown yolo loss mode {self.mode!r}")
        if self.lambda_coord < 0 or self.lambda_noobj < 0:
            raise ConfigInvalid("loss weights must be non-negative")


@dataclass
class GraspLossParams:
    lambda_reg: float = 0.0
    reg_mode: Literal["squared", "printed_linear"] = "squared"

    def __post_init__(self):
        if self.reg_mode not in ("squared", "printed_linear"):
            raise ConfigInvalid(f"unknown regularizer mode {self.reg_mode!r}")
        if not np.isfinite(self.lambda_reg) or self.lambda_reg < 0:
            raise ConfigInvalid("lambda_reg must be finite and non-negative")


def _target_values(target) -> tuple[np.ndarray, int]:
    if isinstance(target, GridTarget):
        return target.values, target.B
    targets = list(target)
    if not targets or not all(isinstance(t, GridTarget) for t in targets):
        raise ShapeMismatch("target must be a GridTarget or a non-empty sequence of them")
    return np.stack([t.values for t in targets]), targets[0].B


def yolo_loss_weights(tv: np.ndarray, B: int, params: YoloLossParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel weights for the squared residual and the sqrt residual."""
    obj = (tv[..., 4:B * 5:5] > 0).astype(tv.dtype)
    cell = obj.max(axis=-1)
    lc = params.lambda_coord
    w_lin = np.zeros_like(tv)
    w_sqrt = np.zeros_like(tv)
    for j in range(B):
        o = obj[..., j]
        w_lin[..., 5 * j] = lc * o
        w_lin[..., 5 * j + 1] = lc * o
        w_sqrt[..., 5 * j + 2] = lc * o
        if params.mode == "printed":
            w_lin[..., 5 * j + 3] = lc * o
            w_lin[..., 5 * j + 4] = (1.0 + lc) * o
        else:
            w_sqrt[..., 5 * j + 3] = lc * o
            w_lin[..., 5 * j + 4] = o + params.lambda_noobj * (1.0 - o)
    w_lin[..., B * 5:] = cell[..., None]
    return w_lin, w_sqrt


def yolo_loss(pred: Tensor, target, params: YoloLossParams | None = None, *,
              reduction: Literal["sum", "mean"] = "sum", stats: dict | None = None) -> Tensor:
    """Grid detection loss for one prediction [S,S,D] or a batch [N,S,S,D].

    ``target`` is a GridTarget, or a sequence of them for a batch. With
    ``reduction="mean"`` a batch loss is divided by N. Negative predicted
    sizes under the square root are clamped to zero (zero gradient) and
    counted in ``stats["clamped_sqrt"]``.
    """
    params = params or YoloLossParams()
    tv, B = _target_values(target)
    if pred.shape != tv.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {tv.shape}")
    tv = tv.astype(pred.data.dtype)
    w_lin, w_sqrt = yolo_loss_weights(tv, B, params)
    clamped = int(np.count_nonzero((pred.data < 0) & (w_sqrt > 0)))
    if stats is not None:
        stats["clamped_sqrt"] = stats.get("clamped_sqrt", 0) + clamped
    if clamped:
        logger.debug("clamped %d negative sizes under sqrt", clamped)
    lin = tsum(mul(square(sub(pred, tv)), w_lin))
    sq = tsum(mul(square(sub(sqrt_clamped(pred), np.sqrt(np.maximum(tv, 0)))), w_sqrt))
    loss = lin + sq
    if reduction == "mean" and pred.ndim == 4:
        loss = loss / float(pred.shape[0])
    return loss


def grasp_loss(pred: Tensor, target, weights: Sequence[Tensor] = (),
               params: GraspLossParams | None = None, *,
               reduction: Literal["sum", "mean"] = "sum") -> Tensor:
    """Squared error on (x1, y1, x2, y2) plus lambda * sum r(w_j).

    r is w**2 in ``squared`` mode and w itself in ``printed_linear`` mode.
    """
    params = params or GraspLossParams()
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape or pred.shape[-1] != 4:
        raise ShapeMismatch(f"grasp prediction {pred.shape} vs target {t.shape}")
    loss = tsum(square(sub(pred, t)))
    if reduction == "mean" and pred.ndim == 2:
        loss = loss / float(pred.shape[0])
    if params.lambda_reg and weights:
        reg = None
        for w in weights:
            term = tsum(square(w)) if params.reg_mode == "squared" else tsum(w)
            reg = term if reg is None else reg + term
        loss = loss + reg * params.lambda_reg
    return loss


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place. Gradients are left as is."""
    if any(p.grad is None for p in params):
        raise MissingGradient("adam_step called on a parameter without a gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
        p.data = p.data - step


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    batches: list[float]
    clamped_sqrt_count: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


LossFn = Callable[[object, list], "Tensor | tuple[Tensor, int]"]


def train_epoch(model, samples: Sequence, loss_fn: LossFn, state: AdamState, batch_size: int,
                seed: int, epoch: int = 0) -> EpochReport:
    """Shuffle with ``seed``, then run Adam over mini-batches.

    ``loss_fn(model, batch)`` returns the per-sample mean loss of the batch,
    optionally paired with a clamp count.
    """
    if len(samples) == 0:
        raise EmptyDataset("cannot train on an empty split")
    if batch_size < 1:
        raise ConfigInvalid("batch_size must be positive")
    params = model.parameters()
    order = np.random.default_rng(seed).permutation(len(samples))
    losses: list[float] = []
    weighted = 0.0
    clamped_total = 0
    for start in range(0, len(samples), batch_size):
        batch = [samples[i] for i in order[start:start + batch_size]]
        for p in params:
            p.zero_grad()
        out = loss_fn(model, batch)
        loss, clamped = out if isinstance(out, tuple) else (out, 0)
        backward(loss)
        adam_step(params, state)
        value = loss.item()
        losses.append(value)
        weighted += value * len(batch)
        clamped_total += clamped
    return EpochReport(epoch, weighted / len(samples), losses, clamped_total)


def fit(model, samples: Sequence, loss_fn: LossFn, state: AdamState, epochs: int, batch_size: int,
        seed: int, on_epoch: Callable[[EpochReport], None] | None = None) -> list[EpochReport]:
    """Run ``epochs`` epochs; epoch k shuffles with seed (seed, k)."""
    reports = []
    for k in range(epochs):
        epoch_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        rep = train_epoch(model, samples, loss_fn, state, batch_size, epoch_seed, epoch=k)
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep)
    return reports


def smoothed(values: Sequence[float], window: int = 5) -> list[float]:
    """Means over consecutive non-overlapping windows (a trailing partial window is dropped)."""
    n = len(values) // window
    return [float(np.mean(values[i * window:(i + 1) * window])) for i in range(n)]


def is_non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))
