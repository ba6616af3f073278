"""Norm-bounded gradient attacks, corruptions and the minimal-radius oracle.

All functions work on batches: ``xs`` is a list with one ``n x d_m`` array per
modality and ``ys`` holds the ``n`` labels.  Gradient attacks ascend the
cross-entropy; the gradient is restricted to the target modalities and
normalised jointly over them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, forward
from .model import MultiModalModel, build_graph, logits
from .rng import PortableRNG

FAMILIES = ("fgm", "pgd_l2", "gaussian_noise", "feature_mask", "missing")
_PROJ_SLACK = 1e-12


class AttackError(ValueError):
    pass


@dataclass
class AttackSpec:
    family: str
    epsilon: float = 0.0
    targets: tuple = (0, 1)
    steps: int = 20
    step_size: float | None = None  # default 2.5 * epsilon / steps
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(int(t) for t in self.targets)
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r}")
        if np.any(np.asarray(self.epsilon) < 0):
            raise AttackError("epsilon must be >= 0")
        if not self.targets:
            raise AttackError("target set is empty")
        if self.family == "pgd_l2" and self.steps < 1:
            raise AttackError("pgd needs steps >= 1")
        if self.family == "feature_mask" and not 0.0 <= float(self.epsilon) <= 1.0:
            raise AttackError("mask fraction must lie in [0, 1]")


@dataclass
class AttackResult:
    xs: list
    success: np.ndarray
    pred: np.ndarray
    norms: np.ndarray  # (n, l) per-modality perturbation norms
    zero_grad: np.ndarray = field(default=None)
    loss: np.ndarray = field(default=None)

    @property
    def total_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.norms ** 2, axis=1))

    @property
    def accuracy(self) -> float:
        return float(np.mean(~self.success)) if self.success.size else 0.0


def _as_batch(xs):
    return [np.array(x, dtype=np.float64, ndmin=2) for x in xs]


def _check_targets(model, targets):
    for t in targets:
        if not 0 <= t < model.n_modalities:
            raise AttackError(f"target modality {t} out of range")


def _result(model, xs, adv, ys, zero_grad=None):
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    z = logits(model, adv)
    norms = np.stack([np.linalg.norm(a - x, axis=1) for a, x in zip(adv, xs)], axis=1)
    return AttackResult(adv, np.argmax(z, axis=1) != ys, np.argmax(z, axis=1), norms,
                        np.zeros(ys.size, bool) if zero_grad is None else zero_grad,
                        cross_entropy_rows(z, ys))


def cross_entropy_rows(z, ys) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    return lse - z[np.arange(z.shape[0]), ys]


class InputGradient:
    """Cross-entropy and its input gradient for a fixed model and label batch.

    The tape is recorded once and re-evaluated with new inputs, so repeated
    calls only pay for the numeric work.
    """

    def __init__(self, model: MultiModalModel, xs, ys):
        self.tape = Tape()
        self.names = [f"x{m}" for m in range(model.n_modalities)]
        inputs = [self.tape.var(n, x) for n, x in zip(self.names, xs)]
        self.logits, _ = build_graph(self.tape, model, inputs)
        self.tape.output = self.tape.softmax_ce(self.logits, ys, reduction="sum")

    def __call__(self, xs):
        forward(self.tape, dict(zip(self.names, xs)))
        grads = backward(self.tape)
        return self.logits.value.copy(), [grads[n] for n in self.names]


def _joint_direction(grads, targets):
    norm = np.sqrt(sum(np.sum(grads[t] ** 2, axis=1) for t in targets))
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)[:, None]
    return [grads[t] / safe for t in targets], zero


def fgm(model, xs, ys, spec: AttackSpec) -> AttackResult:
    """``x' = x + eps * g / ||g||`` over the target modalities."""
    xs = _as_batch(xs)
    _check_targets(model, spec.targets)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    eps = np.broadcast_to(np.asarray(spec.epsilon, dtype=np.float64), ys.shape)[:, None]
    _, grads = InputGradient(model, xs, ys)(xs)
    dirs, zero = _joint_direction(grads, spec.targets)
    adv = [x.copy() for x in xs]
    for t, d in zip(spec.targets, dirs):
        adv[t] = np.where(zero[:, None], xs[t], xs[t] + eps * d)
    result = _result(model, xs, adv, ys, zero)
    result.success &= ~zero
    return result


def _random_ball(spec, ids, dims, eps, restart):
    """Uniform draw from the joint eps-ball over the target modalities."""
    D = sum(dims)
    out = np.empty((len(ids), D))
    for row, i in enumerate(ids):
        rng = PortableRNG(spec.seed, stream=(int(i) << 8) | restart)
        v = rng.normal(D)
        v /= np.linalg.norm(v)
        out[row] = v * rng.uniform(1)[0] ** (1.0 / D)
    out *= eps[:, None]
    return np.split(out, np.cumsum(dims)[:-1], axis=1)


def pgd_l2(model, xs, ys, spec: AttackSpec, ids=None) -> AttackResult:
    """l2 projected gradient ascent on cross-entropy.

    Restart 0 starts at ``x``; later restarts start uniformly inside the ball.
    A sample counts as broken when any iterate of any restart is adversarial;
    the returned point is the final iterate if adversarial, else the last
    adversarial iterate, else the final iterate of restart 0.
    """
    xs = _as_batch(xs)
    _check_targets(model, spec.targets)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    n, R = ys.size, max(1, int(spec.restarts))
    ids = np.arange(n) if ids is None else np.asarray(ids).reshape(-1)
    eps = np.broadcast_to(np.asarray(spec.epsilon, dtype=np.float64), (n,)).copy()
    step = spec.step_size
    if step is None:
        step = 2.5 * eps / spec.steps
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), (n,))
    targets = spec.targets
    dims = [xs[t].shape[1] for t in targets]

    base = [np.tile(x, (R, 1)) for x in xs]
    ys_r = np.tile(ys, R)
    eps_r = np.tile(eps, R)[:, None]
    step_r = np.tile(step, R)[:, None]
    delta = [np.zeros((n * R, d)) for d in dims]
    for r in range(1, R):
        for k, part in enumerate(_random_ball(spec, ids, dims, eps, r)):
            delta[k][r * n:(r + 1) * n] = part

    grad_fn = InputGradient(model, base, ys_r)
    found = np.zeros(n * R, bool)
    best = [np.zeros((n * R, d)) for d in dims]
    zero_any = np.zeros(n * R, bool)

    def current():
        cur = list(base)
        for t, d in zip(targets, delta):
            cur[t] = base[t] + d
        return cur

    for _ in range(spec.steps):
        z, grads = grad_fn(current())
        adv = np.argmax(z, axis=1) != ys_r
        for k in range(len(dims)):
            best[k][adv] = delta[k][adv]
        found |= adv
        dirs, zero = _joint_direction(grads, targets)
        zero_any |= zero
        for k, d in enumerate(dirs):
            delta[k] = delta[k] + step_r * d
        norm = np.sqrt(sum(np.sum(d ** 2, axis=1) for d in delta))[:, None]
        over = norm > eps_r * (1.0 + _PROJ_SLACK)
        if np.any(over):
            factor = np.where(over, eps_r / np.where(norm > 0, norm, 1.0), 1.0)
            delta = [d * factor for d in delta]

    z_final = logits(model, current())
    final_adv = np.argmax(z_final, axis=1) != ys_r
    found |= final_adv
    chosen = [np.where((found & ~final_adv)[:, None], b, d) for b, d in zip(best, delta)]

    success = found.reshape(R, n)
    pick = np.where(success.any(axis=0), np.argmax(success, axis=0), 0)
    rows = pick * n + np.arange(n)
    adv_xs = [x.copy() for x in xs]
    for t, c in zip(targets, chosen):
        adv_xs[t] = xs[t] + c[rows]
    result = _result(model, xs, adv_xs, ys, zero_any.reshape(R, n)[0])
    result.success = success.any(axis=0)
    return result


def missing_modality(model, xs, ys, spec: AttackSpec) -> AttackResult:
    xs = _as_batch(xs)
    _check_targets(model, spec.targets)
    adv = [np.zeros_like(x) if m in spec.targets else x.copy() for m, x in enumerate(xs)]
    return _result(model, xs, adv, ys)


def _per_sample_rng(spec, sample_id, modality):
    return PortableRNG(spec.seed, stream=(int(sample_id) << 8) | (0x80 + modality))


def gaussian_noise(model, xs, ys, spec: AttackSpec, ids=None) -> AttackResult:
    xs = _as_batch(xs)
    _check_targets(model, spec.targets)
    n = xs[0].shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids).reshape(-1)
    adv = [x.copy() for x in xs]
    sigma = float(spec.epsilon)
    if sigma > 0:
        for t in spec.targets:
            noise = np.stack([_per_sample_rng(spec, i, t).normal(xs[t].shape[1]) for i in ids])
            adv[t] = xs[t] + sigma * noise
    return _result(model, xs, adv, ys)


def feature_mask(model, xs, ys, spec: AttackSpec, ids=None) -> AttackResult:
    """Zero ``round(fraction * d)`` uniformly chosen coordinates per target modality."""
    xs = _as_batch(xs)
    _check_targets(model, spec.targets)
    n = xs[0].shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids).reshape(-1)
    adv = [x.copy() for x in xs]
    for t in spec.targets:
        d = xs[t].shape[1]
        k = int(round(float(spec.epsilon) * d))
        for row, i in enumerate(ids):
            cols = _per_sample_rng(spec, i, t).permutation(d)[:k]
            adv[t][row, cols] = 0.0
    return _result(model, xs, adv, ys)


def run_attack(model, xs, ys, spec: AttackSpec, ids=None) -> AttackResult:
    if spec.family == "fgm":
        return fgm(model, xs, ys, spec)
    if spec.family == "pgd_l2":
        return pgd_l2(model, xs, ys, spec, ids=ids)
    if spec.family == "missing":
        return missing_modality(model, xs, ys, spec)
    if spec.family == "gaussian_noise":
        return gaussian_noise(model, xs, ys, spec, ids=ids)
    return feature_mask(model, xs, ys, spec, ids=ids)


def min_radius_oracle(model, xs, ys, targets, tol: float = 1e-4, steps: int = 100,
                      restarts: int = 5, seed: int = 0, eps_init: float = 1.0,
                      max_doublings: int = 40, ids=None) -> np.ndarray:
    """Smallest budget at which PGD found an adversarial example, per sample.

    Budgets double from ``eps_init`` until the attack succeeds, then the
    bracket is bisected to width ``tol``.  The returned value is always a
    budget with a concrete adversarial example, so it upper-bounds the true
    minimal radius.  Samples never broken within ``max_doublings`` give inf.
    """
    xs = _as_batch(xs)
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    n = ys.size
    ids = np.arange(n) if ids is None else np.asarray(ids).reshape(-1)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)

    def attack(rows, eps):
        spec = AttackSpec("pgd_l2", epsilon=0.0, targets=tuple(targets), steps=steps,
                          restarts=restarts, seed=seed)
        spec.epsilon = eps
        sub = [x[rows] for x in xs]
        return pgd_l2(model, sub, ys[rows], spec, ids=ids[rows]).success

    eps = np.full(n, float(eps_init))
    active = np.arange(n)
    for _ in range(max_doublings + 1):
        if active.size == 0:
            break
        ok = attack(active, eps[active])
        hi[active[ok]] = eps[active[ok]]
        failed = active[~ok]
        lo[failed] = eps[failed]
        eps[failed] *= 2.0
        active = failed

    while True:
        open_ = np.flatnonzero(np.isfinite(hi) & (hi - lo > tol))
        if open_.size == 0:
            break
        mid = 0.5 * (lo[open_] + hi[open_])
        ok = attack(open_, mid)
        hi[open_[ok]] = mid[ok]
        lo[open_[~ok]] = mid[~ok]
    return hi
