"""Layered tanh projector with a joint classification + OT objective.

A stack of per-token affine+tanh blocks stands in for the multi-layer
projection module. Every layer's token outputs are kept so an OT penalty
between the two sides of a parallel pair can be attached at any depth.
The classification head on the mean-pooled top layer plays the role of the
downstream cross-entropy. Backpropagation is written out by hand.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import layer_scheduler as sched
from .sequences import ParallelPair, TokenSequence
from .sinkhorn_ot import DEFAULT_MAX_ITER, DEFAULT_TOL, cosine_cost, ot_grad, sinkhorn_solve


class NumericalFailure(ArithmeticError):
    """Training produced a non-finite loss; ``step`` is the failing step."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message)


@dataclass(eq=False)
class ProjectorParams:
    weights: np.ndarray  # (L, dim, dim)
    biases: np.ndarray  # (L, dim)
    cls_weight: np.ndarray  # (K, dim)
    cls_bias: np.ndarray  # (K,)

    def __post_init__(self) -> None:
        if self.weights.ndim != 3 or self.weights.shape[1] != self.weights.shape[2]:
            raise ValueError(f"layer weights must have shape (L, dim, dim), got {self.weights.shape}")
        if self.num_layers < 2:
            raise ValueError("a projector needs at least 2 layers")

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.cls_weight.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.weights, self.biases, self.cls_weight, self.cls_bias)

    def copy(self) -> ProjectorParams:
        return ProjectorParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> ProjectorParams:
        return ProjectorParams(*(np.zeros_like(a) for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> ProjectorParams:
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=float).reshape(a.shape).copy())
            pos += a.size
        return ProjectorParams(*out)

    def axpy(self, scale: float, other: ProjectorParams) -> ProjectorParams:
        """Return ``self + scale * other``."""
        return ProjectorParams(*(a + scale * b for a, b in zip(self.arrays(), other.arrays())))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProjectorParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "cls_weight": self.cls_weight.tolist(),
            "cls_bias": self.cls_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ProjectorParams:
        return cls(*(np.array(d[k], dtype=float) for k in ("weights", "biases", "cls_weight", "cls_bias")))


def init_params(dim: int, num_layers: int, num_classes: int, seed: int = 0, init_scale: float = 0.1) -> ProjectorParams:
    """Near-identity layers, zero biases, small random classifier."""
    rng = np.random.default_rng(seed)
    eye = np.broadcast_to(np.eye(dim), (num_layers, dim, dim))
    weights = eye + init_scale * rng.standard_normal((num_layers, dim, dim)) / np.sqrt(dim)
    cls_weight = init_scale * rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
    return ProjectorParams(weights, np.zeros((num_layers, dim)), cls_weight, np.zeros(num_classes))


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    layers: list[np.ndarray]  # L arrays of shape (length, dim)
    pooled_top: np.ndarray
    logits: np.ndarray
    inputs: TokenSequence

    @property
    def mask(self) -> np.ndarray:
        return self.inputs.mask

    def layer_sequence(self, layer: int) -> TokenSequence:
        """Layer ``layer`` (1-based) outputs as a sequence with the input's mask."""
        return self.inputs.with_embeddings(self.layers[layer - 1])

    def pooled(self, layer: int) -> np.ndarray:
        return self.layers[layer - 1][self.mask].mean(axis=0)


def forward(params: ProjectorParams, seq: TokenSequence) -> ForwardTrace:
    if seq.dim != params.dim:
        raise ValueError(f"input dim {seq.dim} does not match projector dim {params.dim}")
    h = seq.embeddings
    layers = []
    for W, b in zip(params.weights, params.biases):
        h = np.tanh(h @ W.T + b)
        layers.append(h)
    pooled = h[seq.mask].mean(axis=0)
    logits = params.cls_weight @ pooled + params.cls_bias
    return ForwardTrace(layers, pooled, logits, seq)


def surrogate_ce_loss(trace: ForwardTrace, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of the logits and its gradient w.r.t. the logits."""
    logits = trace.logits
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    log_norm = math.log(np.exp(z).sum())
    p = np.exp(z - log_norm)
    grad = p.copy()
    grad[label] -= 1.0
    return float(log_norm - z[label]), grad


@dataclass(eq=False)
class LossBreakdown:
    ce: float
    ot_by_layer: dict[int, float]
    alpha: float
    total: float = field(init=False)

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        self.total = self.ce + self.ot_penalty()

    def ot_penalty(self) -> float:
        if not self.ot_by_layer:
            return 0.0
        return self.alpha / len(self.ot_by_layer) * sum(self.ot_by_layer.values())

    @property
    def ot_mean(self) -> float:
        return sum(self.ot_by_layer.values()) / len(self.ot_by_layer) if self.ot_by_layer else 0.0

    @classmethod
    def mean(cls, parts: Sequence[LossBreakdown]) -> LossBreakdown:
        layers = sorted({l for p in parts for l in p.ot_by_layer})
        ot = {l: sum(p.ot_by_layer[l] for p in parts) / len(parts) for l in layers}
        return cls(sum(p.ce for p in parts) / len(parts), ot, parts[0].alpha)


@dataclass(frozen=True)
class SolverSettings:
    epsilon: float = 0.1
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL


def _check_layers(params: ProjectorParams, layer_set: Sequence[int], alpha: float) -> list[int]:
    layers = sorted(set(int(l) for l in layer_set))
    if alpha > 0 and not layers:
        raise ValueError("an empty OT layer set requires alpha = 0")
    bad = [l for l in layers if not 1 <= l <= params.num_layers]
    if bad:
        raise ValueError(f"OT layers {bad} outside 1..{params.num_layers}")
    return layers


def _loss_and_grad(
    params: ProjectorParams,
    pair: ParallelPair,
    layer_set: Sequence[int],
    alpha: float,
    solver: SolverSettings,
    flow: tuple[bool, bool] = (True, True),
    need_grad: bool = True,
) -> tuple[LossBreakdown, ProjectorParams | None]:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    layers = _check_layers(params, layer_set, alpha)
    sides = (pair.first, pair.second)
    traces = [forward(params, s) for s in sides]

    ce_total = 0.0
    dlogits = []
    for tr, s in zip(traces, sides):
        loss, g = surrogate_ce_loss(tr, s.semantic_id)
        ce_total += 0.5 * loss
        dlogits.append(0.5 * g)

    # upstream gradients w.r.t. each layer output, per side
    douts = [[np.zeros_like(h) for h in tr.layers] for tr in traces]
    ot_by_layer: dict[int, float] = {}
    coef = alpha / len(layers) if layers else 0.0
    for l in layers:
        sa, sb = traces[0].layer_sequence(l), traces[1].layer_sequence(l)
        cost = cosine_cost(sa, sb)
        # the polish only runs if the sweeps stall, so converged solves are unaffected
        res = sinkhorn_solve(cost, solver.epsilon, solver.max_iter, solver.tol, polish=True)
        if need_grad and not res.converged:
            raise NumericalFailure(f"Sinkhorn did not converge at layer {l} (marginal error {res.marginal_error:.3g})")
        ot_by_layer[l] = res.objective
        if need_grad and coef > 0 and (flow[0] or flow[1]):
            ga, gb = ot_grad(sa, sb, res)
            if flow[0]:
                douts[0][l - 1] += coef * ga
            if flow[1]:
                douts[1][l - 1] += coef * gb
    breakdown = LossBreakdown(ce_total, ot_by_layer, alpha)
    if not need_grad:
        return breakdown, None

    grads = params.zeros_like()
    for tr, dl, dout in zip(traces, dlogits, douts):
        grads.cls_weight += np.outer(dl, tr.pooled_top)
        grads.cls_bias += dl
        dpooled = params.cls_weight.T @ dl
        mask = tr.mask
        dout[-1][mask] += dpooled / mask.sum()
        dh = dout[-1]
        for li in range(params.num_layers - 1, -1, -1):
            h = tr.layers[li]
            below = tr.layers[li - 1] if li > 0 else tr.inputs.embeddings
            dz = dh * (1.0 - h * h)
            grads.weights[li] += dz.T @ below
            grads.biases[li] += dz.sum(axis=0)
            if li > 0:
                dh = dout[li - 1] + dz @ params.weights[li]
    return breakdown, grads


def total_loss(
    params: ProjectorParams,
    pair: ParallelPair,
    layer_set: Sequence[int],
    alpha: float,
    epsilon: float = 0.1,
    flow: tuple[bool, bool] = (True, True),
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> LossBreakdown:
    """Joint objective: mean CE of both sides plus ``alpha``-weighted mean OT over ``layer_set``.

    ``flow`` only affects gradients; it is accepted here so loss and
    gradient calls share one signature.
    """
    breakdown, _ = _loss_and_grad(
        params, pair, layer_set, alpha, SolverSettings(epsilon, max_iter, tol), flow, need_grad=False
    )
    return breakdown


def backward(
    params: ProjectorParams,
    pair: ParallelPair,
    layer_set: Sequence[int],
    alpha: float,
    epsilon: float = 0.1,
    flow: tuple[bool, bool] = (True, True),
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> ProjectorParams:
    """Gradients of ``total_loss`` w.r.t. every parameter.

    A False entry in ``flow`` stops the OT gradient on that side of the pair;
    its CE gradient still flows.
    """
    _, grads = _loss_and_grad(params, pair, layer_set, alpha, SolverSettings(epsilon, max_iter, tol), flow)
    assert grads is not None
    return grads


def make_pairing(
    batch: Sequence[Mapping[str, TokenSequence]],
    strategy: str,
    anchor: str = "en",
    rng: np.random.Generator | None = None,
) -> list[tuple[ParallelPair, tuple[bool, bool]]]:
    """Build parallel pairs from per-item utterance groups.

    Args:
        batch: one mapping ``language_id -> utterance`` per semantic item.
        strategy: ``random_pairwise`` draws one unordered language pair per
            item with both sides trainable; ``anchor_frozen`` pairs every
            language with ``anchor`` and stops the anchor-side gradient;
            ``anchor_trained`` builds the same pairs with both sides trainable.
        anchor: anchor language for the anchor strategies.
        rng: generator for the random draws.

    Returns:
        ``(pair, (first_trainable, second_trainable))`` tuples.
    """
    rng = rng if rng is not None else np.random.default_rng()
    out: list[tuple[ParallelPair, tuple[bool, bool]]] = []
    for group in batch:
        langs = list(group)
        if strategy == "random_pairwise":
            if len(langs) < 2:
                raise ValueError(f"random pairing needs >= 2 languages per item, got {langs}")
            i, j = sorted(rng.choice(len(langs), size=2, replace=False).tolist())
            out.append((ParallelPair(group[langs[i]], group[langs[j]]), (True, True)))
        elif strategy in ("anchor_frozen", "anchor_trained"):
            if anchor not in group:
                raise ValueError(f"anchor language {anchor!r} missing from batch item")
            flags = (strategy == "anchor_trained", True)
            for lang in langs:
                if lang != anchor:
                    out.append((ParallelPair(group[anchor], group[lang]), flags))
        else:
            raise ValueError(f"unknown pairing strategy {strategy!r}")
    return out


class StepResult(NamedTuple):
    params: ProjectorParams
    losses: LossBreakdown
    scheduler: sched.SchedulerState | None
    layers: list[int]
    reward: float | None


def choose_layers(
    strategy: str,
    candidates: Sequence[int],
    scheduler: sched.SchedulerState | None,
    rng: np.random.Generator,
) -> list[int]:
    if strategy in ("ucb_all", "ucb_lower"):
        if scheduler is None:
            raise ValueError(f"layer strategy {strategy!r} needs a scheduler state")
        return [sched.select(scheduler)]
    if strategy == "random":
        return [int(rng.choice(list(candidates)))]
    if strategy in ("single", "multi"):
        return list(candidates)
    raise ValueError(f"unknown layer strategy {strategy!r}")


def train_step(
    params: ProjectorParams,
    batch: Sequence[tuple[ParallelPair, tuple[bool, bool]]],
    scheduler: sched.SchedulerState | None,
    *,
    lr: float,
    alpha: float,
    solver: SolverSettings,
    layer_strategy: str,
    candidates: Sequence[int],
    step: int,
    seed: int = 0,
    reward_source: str = "total",
) -> StepResult:
    """One gradient-descent step on a batch of flagged pairs.

    The OT layer set is chosen first (scheduler draw, random draw or fixed
    set), losses and gradients are averaged over the batch, the scheduler
    is rewarded with the loss change of the chosen layer, and parameters
    move by ``-lr`` times the mean gradient.
    """
    if not batch:
        raise ValueError("empty batch")
    rng = np.random.default_rng([seed, step, 2])
    layers = choose_layers(layer_strategy, candidates, scheduler, rng) if alpha > 0 else []

    parts = []
    grad_sum = params.zeros_like()
    for pair, flow in batch:
        try:
            # overflow shows up as a non-finite loss below; no need for numpy warnings too
            with np.errstate(over="ignore", invalid="ignore"):
                br, g = _loss_and_grad(params, pair, layers, alpha, solver, flow)
        except NumericalFailure as exc:
            raise NumericalFailure(f"{exc} at step {step}", step) from None
        parts.append(br)
        grad_sum = grad_sum.axpy(1.0, g)
    losses = LossBreakdown.mean(parts)
    if not math.isfinite(losses.total) or not grad_sum.is_finite():
        raise NumericalFailure(f"non-finite loss at step {step}: {losses.total}", step)

    reward = None
    if scheduler is not None and layer_strategy in ("ucb_all", "ucb_lower") and layers:
        observed = {"total": losses.total, "ce": losses.ce, "ot": losses.ot_mean}[reward_source]
        scheduler, reward = sched.observe(scheduler, layers[0], observed)
    new_params = params.axpy(-lr / len(batch), grad_sum)
    return StepResult(new_params, losses, scheduler, layers, reward)


def save_checkpoint(
    path: str | Path, params: ProjectorParams, scheduler: sched.SchedulerState | None, step: int
) -> None:
    payload = {
        "step": step,
        "params": params.to_dict(),
        "scheduler": None if scheduler is None else scheduler.to_dict(),
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ProjectorParams, sched.SchedulerState | None, int]:
    payload = json.loads(Path(path).read_text())
    sch = payload.get("scheduler")
    return (
        ProjectorParams.from_dict(payload["params"]),
        None if sch is None else sched.SchedulerState.from_dict(sch),
        int(payload["step"]),
    )
