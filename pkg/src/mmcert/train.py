"""Training procedures: JT, OJT, the two CRMT steps and CRMT-AT.

Step 1 minimises ``CE + rho * L1`` where

    L1 = mean_i log sum_m sum_{k != y} exp(s_k^m - s_y^m)

pushes every modality's own score margin up.  After each optimizer step the
orthogonal rows are re-orthonormalised and ``a`` is clamped at 0.

Step 2 freezes encoders and ``W~`` and moves only ``a`` to maximise the mean
signed orthogonal-head bound at the binding class.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, pgd_l2, run_attack
from .autodiff import NonFiniteError, Tape, backward
from .certify import CertificationError, estimate_lipschitz, mean_radius
from .model import (ORTHO_TOL, MultiModalModel, OrthogonalityError, build_graph, logits,
                    orthonormalize, uni_scores)
from .rng import PortableRNG

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "ce", "l1", "l2", "mean_radius", "clean_acc", "orth_residual")
A_REINIT = 1e-3


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    rho: float = 0.5
    learning_rate: float = 0.05
    learning_rate_step2: float = 0.01
    epochs_step1: int = 100
    epochs_step2: int = 30
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    iterations: int = 1
    step2_correct_only: bool = False
    at_spec: AttackSpec | None = None

    def validate(self):
        if self.rho < 0:
            raise TrainingError("rho must be >= 0")
        if min(self.learning_rate, self.learning_rate_step2) <= 0:
            raise TrainingError("learning rates must be positive")
        if min(self.epochs_step1, self.epochs_step2, self.batch_size, self.iterations) < 1:
            raise TrainingError("epochs, batch size and iterations must be positive")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    ce: float
    l1: float = float("nan")
    l2: float = float("nan")
    mean_radius: float = float("nan")
    clean_acc: float = float("nan")
    orth_residual: float = float("nan")
    min_a: float = float("nan")


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)  # phase -> record before its first epoch
    notes: list = field(default_factory=list)

    def extend(self, other: "TrainTrace"):
        offset = len(self.records)
        for r in other.records:
            self.records.append(EpochRecord(**{**r.__dict__, "epoch": r.epoch + offset}))
        for phase, rec in other.initial.items():
            self.initial.setdefault(phase, rec)
        self.notes.extend(other.notes)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# losses (numeric)


def loss_ce(z, y) -> float:
    z = np.array(z, dtype=np.float64, ndmin=2)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    rows = np.arange(y.size)
    top = np.argmax(z, axis=1)
    m = z[rows, top]
    rest = np.exp(z - m[:, None])
    rest[rows, top] = 0.0
    # log1p keeps full relative precision when one logit dominates
    return float(np.mean((m - z[rows, y]) + np.log1p(np.sum(rest, axis=1))))


def loss_l1(scores, y) -> float:
    """Mean log-sum-exp of ``s_k^m - s_y^m`` over modalities and ``k != y``."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    rows = np.arange(y.size)
    gaps = np.concatenate([np.array(s, ndmin=2) - np.array(s, ndmin=2)[rows, y][:, None]
                           for s in scores], axis=1)
    K = np.array(scores[0], ndmin=2).shape[1]
    mask = np.tile(np.arange(K)[None, :] != y[:, None], (1, len(scores)))
    gaps = np.where(mask, gaps, -np.inf)
    m = np.max(gaps, axis=1, keepdims=True)
    return float(np.mean(m[:, 0] + np.log(np.sum(np.exp(gaps - m), axis=1))))


# ---------------------------------------------------------------------------
# graph builders


def _broadcast_col(tape, col, K):
    """Repeat an ``n x 1`` node across ``K`` columns."""
    return tape.matmul(col, tape.const(np.ones((1, K))))


def l1_node(tape, score_nodes, ys):
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    n, K = score_nodes[0].shape
    rows = np.arange(n)
    gaps = [tape.sub(s, _broadcast_col(tape, tape.gather(s, rows, ys), K)) for s in score_nodes]
    mask = np.tile(np.arange(K)[None, :] != ys[:, None], (1, len(score_nodes)))
    return tape.mean(tape.logsumexp(tape.concat(gaps), mask=mask))


def training_graph(model: MultiModalModel, xs, ys, rho: float = 0.0, trainable=None):
    """Tape for ``CE + rho * L1`` with model parameters as variables.

    Returns ``(tape, ce_node, l1_node_or_None)``; the tape output is the total.
    ``rho == 0`` records CE alone so the objective is exactly the OJT one.
    """
    tape = Tape()
    params = model.parameters()
    names = list(params) if trainable is None else list(trainable)
    pnodes = {k: tape.var(k, params[k]) for k in names}
    inputs = [tape.const(x) for x in xs]
    z, scores = build_graph(tape, model, inputs, pnodes)
    ce = tape.softmax_ce(z, ys)
    l1 = None
    total = ce
    if rho > 0:
        if scores is None:
            raise TrainingError("the L1 regulariser needs an orthogonal head")
        l1 = l1_node(tape, scores, ys)
        total = tape.add(ce, tape.scale(l1, rho))
    tape.output = total
    return tape, ce, l1


def step2_graph(scores, ys, a, bias, tau, correct_only: bool = False):
    """Tape for ``L2 = -mean signed orthogonal bound`` with ``a0, a1, ...`` as variables.

    ``scores`` are the frozen per-modality ``n x K`` score arrays, ``tau`` the
    ``(l, K)`` score Lipschitz constants.  The binding class is re-selected
    from the current values (first index on ties).
    """
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    n, K = np.shape(scores[0])
    rows = np.arange(n)
    onehot = np.zeros((n, K))
    onehot[rows, ys] = 1.0
    tape = Tape()
    a_nodes = [tape.var(f"a{m}", np.array(v, ndmin=2)) for m, v in enumerate(a)]
    total = None
    sq = None
    for m, (s, av) in enumerate(zip(scores, a_nodes)):
        weighted = tape.mul(tape.const(s), av)
        total = weighted if total is None else tape.add(total, weighted)
        at = tape.mul(av, tape.const(np.array(tau[m], ndmin=2)))
        own = _broadcast_col(tape, tape.matmul(tape.const(onehot), tape.transpose(at)), K)
        term = tape.square(tape.add(own, at))
        sq = term if sq is None else tape.add(sq, term)
    z = tape.add(total, tape.const(np.array(bias, ndmin=2)))
    numer = tape.sub(_broadcast_col(tape, tape.gather(z, rows, ys), K), z)
    bounds = tape.div(numer, tape.sqrt(sq))
    vals = np.where(onehot > 0, np.inf, bounds.value)
    j_star = np.argmin(vals, axis=1)
    picked = tape.gather(bounds, rows, j_star)
    if correct_only:
        keep = (np.argmax(z.value, axis=1) == ys).astype(np.float64).reshape(-1, 1)
        count = max(1.0, float(keep.sum()))
        loss = tape.scale(tape.sum(tape.mul(picked, tape.const(keep))), -1.0 / count)
    else:
        loss = tape.scale(tape.mean(picked), -1.0)
    tape.output = loss
    return tape, loss


# ---------------------------------------------------------------------------
# optimisation helpers


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr, self.momentum, self.velocity = lr, momentum, {}

    def step(self, params: dict, grads: dict) -> dict:
        out = {}
        for k, g in grads.items():
            if self.momentum:
                v = self.momentum * self.velocity.get(k, np.zeros_like(g)) + g
                self.velocity[k] = v
            else:
                v = g
            out[k] = params[k] - self.lr * v
        return out


def _decay(grads, params, wd):
    """Add the gradient of ``wd/2 * ||w||^2`` for weight matrices (not biases or a)."""
    return {k: g + wd * params[k] if k.endswith(".weight") or k.startswith("head.W")
            and not k.startswith("head.Wt") else g for k, g in grads.items()}


def _optimizer(config, lr):
    return SGD(lr, config.momentum if config.optimizer == "sgd-momentum" else 0.0)


def _batches(n, batch_size, seed, epoch):
    order = PortableRNG(seed, stream=0xB000 + epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _project(model):
    if model.kind != "orthogonal":
        return
    model.head.W_tilde = [orthonormalize(w) for w in model.head.W_tilde]
    model.head.a = [np.maximum(a, 0.0) for a in model.head.a]


def _evaluate(model, data, phase, epoch, rho=None) -> EpochRecord:
    z = logits(model, data.xs)
    rec = EpochRecord(epoch, phase, loss_ce(z, data.y),
                      clean_acc=float(np.mean(np.argmax(z, axis=1) == data.y)))
    if model.kind == "orthogonal":
        rec.l1 = loss_l1(uni_scores(model, data.xs), data.y)
        rec.orth_residual = model.head.orth_residual()
        rec.min_a = float(min(np.min(a) for a in model.head.a))
    rec.mean_radius = mean_radius(model, data.xs, data.y, estimate_lipschitz(model))
    return rec


def _check_invariants(model, rec):
    if model.kind != "orthogonal":
        return
    if rec.orth_residual > ORTHO_TOL:
        raise OrthogonalityError(f"epoch {rec.epoch}: orthonormality residual {rec.orth_residual:.3e}")
    if any(np.any(a < 0) for a in model.head.a):
        raise TrainingError(f"epoch {rec.epoch}: negative modality weight")


def _fit(model, data, config, phase, rho, adversarial=None):
    """Mini-batch descent on ``CE + rho * L1`` over every parameter."""
    config.validate()
    model = model.copy()
    trace = TrainTrace()
    trace.initial[phase] = _evaluate(model, data, phase, 0)
    opt = _optimizer(config, config.learning_rate)
    for epoch in range(1, config.epochs_step1 + 1):
        for rows in _batches(len(data), config.batch_size, config.seed, epoch):
            xs = [x[rows] for x in data.xs]
            ys = data.y[rows]
            if adversarial is not None:
                xs = adversarial(model, xs, ys, rows)
            try:
                tape, _, _ = training_graph(model, xs, ys, rho)
                grads = backward(tape)
            except NonFiniteError as exc:
                raise DivergenceError(f"{phase} epoch {epoch}: {exc}", trace) from None
            if config.weight_decay:
                grads = _decay(grads, model.parameters(), config.weight_decay)
            model.set_parameters(opt.step(model.parameters(), grads))
            _project(model)
        try:
            rec = _evaluate(model, data, phase, epoch)
        except (NonFiniteError, FloatingPointError, CertificationError) as exc:
            raise DivergenceError(f"{phase} epoch {epoch}: {exc}", trace) from None
        if not np.isfinite(rec.ce) or not np.isfinite(rec.l1 if model.kind == "orthogonal" else 0.0):
            raise DivergenceError(f"{phase} epoch {epoch}: non-finite loss", trace)
        _check_invariants(model, rec)
        trace.records.append(rec)
    return model, trace


def train_jt(model, data, config: TrainConfig):
    if model.kind != "standard":
        raise TrainingError("JT needs a standard head")
    return _fit(model, data, config, "jt", 0.0)


def train_ojt(model, data, config: TrainConfig):
    if model.kind != "orthogonal":
        raise TrainingError("OJT needs an orthogonal head")
    return _fit(model, data, config, "ojt", 0.0)


def train_step1(model, data, config: TrainConfig):
    if model.kind != "orthogonal":
        raise TrainingError("CRMT step 1 needs an orthogonal head")
    return _fit(model, data, config, "step1", config.rho)


def _reinit_dead_classes(a, trace, epoch):
    stacked = np.stack([v[0] for v in a])
    dead = np.flatnonzero(np.all(stacked == 0.0, axis=0))
    if dead.size:
        msg = f"step2 epoch {epoch}: reinitialised a for classes {dead.tolist()} to {A_REINIT:g}"
        log.warning(msg)
        trace.notes.append(msg)
        for v in a:
            v[0, dead] = A_REINIT
    return a


def train_step2(model, data, config: TrainConfig, est=None):
    """Gradient descent on ``L2`` over ``a`` only.

    ``est`` defaults to the spectral-product estimate of the frozen model and
    is computed once.  The returned model carries the ``a`` with the best
    training-set mean certified radius among all epochs, epoch 0 included.
    """
    config.validate()
    if model.kind != "orthogonal":
        raise TrainingError("CRMT step 2 needs an orthogonal head")
    model = model.copy()
    est = estimate_lipschitz(model) if est is None else est
    scores = uni_scores(model, data.xs)
    trace = TrainTrace()
    a = [v.copy() for v in model.head.a]

    def record(epoch):
        model.head.a = [v.copy() for v in a]
        z = logits(model, data.xs)
        tape, loss = step2_graph(scores, data.y, a, model.head.bias, est.tau,
                                 config.step2_correct_only)
        return EpochRecord(epoch, "step2", loss_ce(z, data.y),
                           l1=loss_l1(scores, data.y), l2=float(loss.value[0, 0]),
                           mean_radius=mean_radius(model, data.xs, data.y, est),
                           clean_acc=float(np.mean(np.argmax(z, axis=1) == data.y)),
                           orth_residual=model.head.orth_residual(),
                           min_a=float(min(np.min(v) for v in a)))

    a = _reinit_dead_classes(a, trace, 0)
    first = record(0)
    trace.initial["step2"] = first
    best_radius, best_a, best_epoch = first.mean_radius, [v.copy() for v in a], 0
    opt = _optimizer(config, config.learning_rate_step2)
    for epoch in range(1, config.epochs_step2 + 1):
        for rows in _batches(len(data), config.batch_size, config.seed, 1000 + epoch):
            a = _reinit_dead_classes(a, trace, epoch)
            try:
                tape, _ = step2_graph([s[rows] for s in scores], data.y[rows], a,
                                      model.head.bias, est.tau, config.step2_correct_only)
                grads = backward(tape)
            except NonFiniteError as exc:
                raise DivergenceError(f"step2 epoch {epoch}: {exc}", trace) from None
            params = {f"a{m}": v for m, v in enumerate(a)}
            new = opt.step(params, grads)
            a = [np.maximum(new[f"a{m}"], 0.0) for m in range(len(a))]
        a = _reinit_dead_classes(a, trace, epoch)
        rec = record(epoch)
        _check_invariants(model, rec)
        trace.records.append(rec)
        if rec.mean_radius > best_radius:
            best_radius, best_a, best_epoch = rec.mean_radius, [v.copy() for v in a], epoch
    model.head.a = best_a
    trace.notes.append(f"step2 kept a from epoch {best_epoch}")
    return model, trace


def train_crmt(model, data, config: TrainConfig, step1=None):
    """Step 1 then step 2, repeated ``config.iterations`` times."""
    step1 = step1 or train_step1
    trace = TrainTrace()
    for _ in range(config.iterations):
        model, t1 = step1(model, data, config)
        trace.extend(t1)
        model, t2 = train_step2(model, data, config)
        trace.extend(t2)
    return model, trace


def train_crmt_at(model, data, config: TrainConfig):
    """CRMT whose step 1 sees PGD/FGM examples regenerated for every batch."""
    spec = config.at_spec
    if spec is None or spec.family not in ("pgd_l2", "fgm"):
        raise TrainingError("CRMT-AT needs an fgm or pgd_l2 at_spec")

    def adversarial(current, xs, ys, rows):
        if spec.family == "pgd_l2":
            return pgd_l2(current, xs, ys, spec, ids=rows).xs
        return run_attack(current, xs, ys, spec).xs

    def step1(m, d, c):
        if m.kind != "orthogonal":
            raise TrainingError("CRMT step 1 needs an orthogonal head")
        return _fit(m, d, c, "step1-at", c.rho, adversarial)

    return train_crmt(model, data, config, step1=step1)
