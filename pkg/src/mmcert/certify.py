"""Margin-based certified radii for late-fusion classifiers.

For a correctly classified sample with label ``y`` and a competitor ``j`` the
logit gap splits into per-modality pieces.  With a standard head the piece of
modality ``m`` is ``c_j^m * zeta_j^m`` (integration factor times representation
margin); with an orthogonal head it is ``gamma_j^m = a_y^m s_y^m - a_j^m s_j^m``.
Dividing the gap by a Cauchy-Schwarz combination of per-modality Lipschitz
constants gives a radius no l2 perturbation below which can flip the decision:

    standard:    (sum_m c zeta + beta) / sqrt(sum_m (c tau)^2)
    orthogonal:  (sum_m gamma + beta~) / sqrt(sum_m (a_y tau~_y + a_j tau~_j)^2)

The reported radius is the minimum over ``j != y``.  Restricting the attack to
a single modality replaces the square-root denominator by that modality's term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ACTIVATIONS, Encoder, MultiModalModel, encode, logits, uni_scores
from .rng import PortableRNG

DEGENERATE_TOL = 1e-12


class CertificationError(ValueError):
    pass


class DegeneratePairError(CertificationError):
    pass


class DegenerateModelError(CertificationError):
    pass


# ---------------------------------------------------------------------------
# Lipschitz estimates


def _power_iterate(W, v, max_iter, rtol):
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            return v, 0.0
        w = W.T @ (u / new_sigma)
        v = w / np.linalg.norm(w)
        converged = abs(new_sigma - sigma) <= rtol * new_sigma
        sigma = new_sigma
        if converged:
            break
    return v, sigma


def spectral_norm(W, max_iter: int = 100, rtol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0 or not np.any(W):
        return 0.0
    v = PortableRNG(seed, stream=0x5E11).normal(W.shape[1])
    v, sigma = _power_iterate(W, v / np.linalg.norm(v), max_iter, rtol)
    return float(np.linalg.norm(W @ v)) if sigma else 0.0


def spectral_norm_upper(W, max_iter: int = 100, rtol: float = 1e-10, seed: int = 0,
                        refine_iter: int = 5000, residual_tol: float = 1e-10) -> float:
    """Upper bound on the largest singular value.

    Power iteration approaches ``sigma_max`` from below, so its estimate alone
    is not a bound.  With Rayleigh quotient ``mu = ||W v||^2`` and residual
    ``r = W^T W v - mu v`` some eigenvalue of ``W^T W`` lies within ``||r||``
    of ``mu``; for the converged top vector that eigenvalue is ``sigma_max^2``,
    so ``sqrt(mu + ||r||)`` bounds it.  Iteration continues past the usual
    stopping rule until ``||r|| <= residual_tol * mu`` to keep the bound tight.
    """
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        return np.inf
    if W.size == 0 or not np.any(W):
        return 0.0
    v = PortableRNG(seed, stream=0x5E11).normal(W.shape[1])
    v, sigma = _power_iterate(W, v / np.linalg.norm(v), max_iter, rtol)
    if sigma == 0.0:
        return 0.0

    def bracket(v):
        u = W @ v
        mu = float(u @ u)
        return mu, float(np.linalg.norm(W.T @ u - mu * v))

    mu, res = bracket(v)
    for _ in range(refine_iter):
        if res <= residual_tol * mu:
            break
        w = W.T @ (W @ v)
        v = w / np.linalg.norm(w)
        mu, res = bracket(v)
    return float(np.sqrt(mu + res))


def lipschitz_upper(encoder: Encoder, direction_norm: float = 1.0) -> float:
    """``direction_norm * prod_l sigma_max(W_l)``; sound for 1-Lipschitz activations.

    Each factor comes from :func:`spectral_norm_upper`, so the product never
    falls below the true constant through power-iteration error.
    """
    value = float(direction_norm)
    for layer in encoder.layers:
        if layer.activation not in ACTIVATIONS:
            raise CertificationError(f"unsupported activation {layer.activation!r}")
        value *= spectral_norm_upper(layer.weight)
    return value


def lipschitz_sampled_lower(f, box, n_pairs: int, seed: int, guided: bool = True) -> float:
    """Empirical lower bound ``max |f(x) - f(x')| / ||x - x'||`` over sampled pairs.

    ``f`` maps an ``n x d`` batch to ``n x p`` (or ``n``) outputs; vector
    outputs use the l2 norm of the difference.  ``box`` is ``(lo, hi)``.

    Half of the pairs are independent uniform draws from the box.  With
    ``guided`` the other half start from a uniform point and step along the top
    right-singular direction of a finite-difference Jacobian there.  Either
    way every value that enters the maximum is a measured pair ratio.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(-1) for b in box)
    d = lo.size
    rng = PortableRNG(seed, stream=0x1A9)

    def evaluate(x):
        out = np.asarray(f(x), dtype=np.float64)
        return out.reshape(x.shape[0], -1)

    n_guided = n_pairs // 2 if guided else 0
    n_random = n_pairs - n_guided
    x1 = lo + (hi - lo) * rng.uniform((n_random, d))
    x2 = lo + (hi - lo) * rng.uniform((n_random, d))
    starts, ends = [x1], [x2]
    if n_guided:
        base = lo + (hi - lo) * rng.uniform((n_guided, d))
        width = float(np.max(hi - lo)) or 1.0
        fd = 1e-6 * width
        f0 = evaluate(base)
        jac = np.empty((n_guided, f0.shape[1], d))
        for k in range(d):
            probe = base.copy()
            probe[:, k] += fd
            jac[:, :, k] = (evaluate(probe) - f0) / fd
        _, _, vt = np.linalg.svd(jac)
        direction = vt[:, 0, :]
        starts.append(base)
        ends.append(base + 1e-3 * width * direction)
    a = np.concatenate(starts)
    b = np.concatenate(ends)
    dist = np.linalg.norm(a - b, axis=1)
    keep = dist > 0
    if not np.any(keep):
        return 0.0
    diff = np.linalg.norm(evaluate(a[keep]) - evaluate(b[keep]), axis=1)
    return float(np.max(diff / dist[keep]))


@dataclass
class LipschitzEstimate:
    """Per-modality Lipschitz constants of the margin / score maps.

    ``tau`` has shape ``(l, K, K)`` for a standard head (entry ``[m, y, j]`` is
    the constant of the unit-direction margin for the pair ``(y, j)``) and
    ``(l, K)`` for an orthogonal head (entry ``[m, k]`` bounds score ``k``).
    """

    kind: str
    tau: np.ndarray
    encoder: np.ndarray
    method: str = "spectral-product"

    def scaled(self, factor: float) -> "LipschitzEstimate":
        return replace(self, tau=self.tau * factor, encoder=self.encoder * factor)


def estimate_lipschitz(model: MultiModalModel) -> LipschitzEstimate:
    enc = np.array([lipschitz_upper(e) for e in model.encoders])
    K, l = model.K, model.n_modalities
    if model.kind == "standard":
        tau = np.broadcast_to(enc[:, None, None], (l, K, K)).copy()
    else:
        row_norms = np.stack([np.linalg.norm(w, axis=1) for w in model.head.W_tilde])
        tau = enc[:, None] * row_norms
    return LipschitzEstimate(model.kind, tau, enc)


# ---------------------------------------------------------------------------
# margins and integration factors


def margin(model: MultiModalModel, x, m: int, y: int, k: int) -> float:
    """Signed representation margin of modality ``m`` between classes ``y`` and ``k``."""
    if model.kind != "standard":
        raise CertificationError("margin is defined for a standard head")
    diff = model.head.W_parts[m][y] - model.head.W_parts[m][k]
    norm = float(np.linalg.norm(diff))
    if norm < DEGENERATE_TOL:
        raise DegeneratePairError(f"rows {y} and {k} of W_{m} coincide")
    phi = model.encoders[m](np.array(x, dtype=np.float64, ndmin=2))[0]
    return float(diff @ phi) / norm


@dataclass
class IntegrationFactors:
    kind: str
    c: np.ndarray | None  # per modality, standard head
    beta: float
    a_y: np.ndarray | None = None  # per modality, orthogonal head
    a_j: np.ndarray | None = None


def integration_factors(head, y: int, j: int) -> IntegrationFactors:
    if y == j:
        raise ValueError("class pair needs y != j")
    beta = float(head.bias[0, y] - head.bias[0, j])
    if head.kind == "standard":
        c = np.array([np.linalg.norm(w[y] - w[j]) for w in head.W_parts])
        return IntegrationFactors("standard", c, beta)
    return IntegrationFactors("orthogonal", None, beta,
                              a_y=np.array([a[0, y] for a in head.a]),
                              a_j=np.array([a[0, j] for a in head.a]))


def factor_table(model: MultiModalModel) -> np.ndarray:
    """``c[m, y, j] = ||W_m[y] - W_m[j]||`` for every class pair."""
    return np.stack([np.linalg.norm(w[:, None, :] - w[None, :, :], axis=2)
                     for w in model.head.W_parts])


# ---------------------------------------------------------------------------
# bound arithmetic on explicit components


def standard_bound(zeta, c, tau, beta):
    """Multi-modal and per-modality bounds for explicit components.

    ``zeta``, ``c``, ``tau`` have shape ``(pairs, l)`` and ``beta`` shape
    ``(pairs,)``.  Returns ``(radius, uni_radii, binding)`` as minima over the
    pairs; ``binding`` indexes the pair attaining the multi-modal minimum.
    """
    zeta, c, tau = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (zeta, c, tau))
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    numer = np.sum(c * zeta, axis=1) + beta
    return _minimise(numer, c * tau)


def orth_bound(s_y, s_j, a_y, a_j, tau_y, tau_j, beta):
    """Orthogonal-head analogue of :func:`standard_bound` (same shapes)."""
    s_y, s_j, a_y, a_j, tau_y, tau_j = (np.atleast_2d(np.asarray(v, dtype=np.float64))
                                        for v in (s_y, s_j, a_y, a_j, tau_y, tau_j))
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    numer = np.sum(a_y * s_y - a_j * s_j, axis=1) + beta
    return _minimise(numer, a_y * tau_y + a_j * tau_j)


def _minimise(numer, eta):
    denom = np.sqrt(np.sum(eta * eta, axis=1))
    if np.any(denom == 0.0):
        raise DegenerateModelError("every modality has zero vulnerability for some class pair")
    radius = numer / denom
    with np.errstate(divide="ignore"):
        uni = np.where(eta > 0, numer[:, None] / np.where(eta > 0, eta, 1.0), np.inf)
    binding = int(np.argmin(radius))
    return float(radius[binding]), np.min(uni, axis=0), binding


# ---------------------------------------------------------------------------
# certificates for model/sample pairs


@dataclass
class CertificateReport:
    sample_id: int
    y: int
    pred: int
    valid: bool
    kind: str
    margins: np.ndarray  # (l, K): zeta_j^m (standard) or gamma_j^m (orthogonal); NaN at y
    binding_j: int
    radius_mm: float
    radius_uni: np.ndarray  # (l,)
    eta: np.ndarray  # (l,) vulnerability indicators at binding_j
    signed_radius: float = 0.0  # min over j of the signed bound (negative when misclassified)
    numerators: np.ndarray = field(default=None, repr=False)  # (K,), NaN at y


def _pairwise_terms(model, xs, ys, est):
    """Per-sample, per-class, per-modality numerator pieces and eta values."""
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    n, K, l = ys.size, model.K, model.n_modalities
    rows = np.arange(n)
    pieces = np.empty((n, K, l))
    eta = np.empty((n, K, l))
    if model.kind == "standard":
        c = factor_table(model)
        for m, phi in enumerate(encode(model, xs)):
            part = phi @ model.head.W_parts[m].T
            pieces[:, :, m] = part[rows, ys][:, None] - part
            eta[:, :, m] = c[m, ys, :] * est.tau[m, ys, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            margins = pieces / np.transpose(c[:, ys, :], (1, 2, 0))
    else:
        for m, s in enumerate(uni_scores(model, xs)):
            a = model.head.a[m][0]
            weighted = a[None, :] * s
            pieces[:, :, m] = weighted[rows, ys][:, None] - weighted
            eta[:, :, m] = (a[ys] * est.tau[m, ys])[:, None] + a[None, :] * est.tau[m][None, :]
        margins = pieces.copy()
    bias = model.head.bias[0]
    beta = bias[ys][:, None] - bias[None, :]
    return pieces, eta, margins, beta


def certify_batch(model: MultiModalModel, xs, ys, est: LipschitzEstimate,
                  ids=None) -> list[CertificateReport]:
    """Certificates for every row of a batch (any number of modalities)."""
    if est.kind != model.kind:
        raise CertificationError(f"{est.kind} Lipschitz estimate for a {model.kind} head")
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    ids = np.arange(ys.size) if ids is None else np.asarray(ids).reshape(-1)
    pieces, eta, margins, beta = _pairwise_terms(model, xs, ys, est)
    numer = np.sum(pieces, axis=2) + beta  # (n, K)
    denom = np.sqrt(np.sum(eta * eta, axis=2))
    preds = np.argmax(logits(model, xs), axis=1)
    K = model.K
    reports = []
    for i in range(ys.size):
        y = int(ys[i])
        others = np.array([j for j in range(K) if j != y])
        if np.any(denom[i, others] == 0.0):
            raise DegenerateModelError(f"sample {ids[i]}: zero denominator for some class pair")
        bounds = numer[i, others] / denom[i, others]
        k = int(np.argmin(bounds))
        j_star = int(others[k])
        e = eta[i, others, :]
        with np.errstate(divide="ignore"):
            uni = np.where(e > 0, numer[i, others][:, None] / np.where(e > 0, e, 1.0), np.inf)
        uni = np.min(uni, axis=0)
        valid = bool(preds[i] == y and np.all(numer[i, others] > 0))
        marg = margins[i].T.copy()
        marg[:, y] = np.nan
        nums = numer[i].copy()
        nums[y] = np.nan
        reports.append(CertificateReport(
            sample_id=int(ids[i]), y=y, pred=int(preds[i]), valid=valid, kind=model.kind,
            margins=marg, binding_j=j_star,
            radius_mm=float(bounds[k]) if valid else 0.0,
            radius_uni=uni if valid else np.zeros(model.n_modalities),
            eta=eta[i, j_star, :].copy(), signed_radius=float(bounds[k]), numerators=nums))
    return reports


def _single(model, x, y, est, sample_id):
    xs = [np.array(v, dtype=np.float64, ndmin=2) for v in x]
    return certify_batch(model, xs, [y], est, ids=[sample_id])[0]


def certify_standard(model, x, y, est, sample_id: int = 0) -> CertificateReport:
    """Two-modality standard-head certificate of one sample."""
    if model.kind != "standard" or model.n_modalities != 2:
        raise CertificationError("certify_standard needs a two-modality standard head")
    return _single(model, x, y, est, sample_id)


def certify_nmodal(model, x, y, est, sample_id: int = 0) -> CertificateReport:
    """Standard-head certificate over any number (>= 2) of modalities."""
    if model.kind != "standard":
        raise CertificationError("certify_nmodal needs a standard head")
    return _single(model, x, y, est, sample_id)


def certify_orth(model, x, y, est, sample_id: int = 0) -> CertificateReport:
    if model.kind != "orthogonal":
        raise CertificationError("certify_orth needs an orthogonal head")
    return _single(model, x, y, est, sample_id)


def signed_bounds(model, xs, ys, est):
    """Vectorised ``(signed_radius, valid)`` arrays for a batch.

    ``signed_radius`` is the minimum over ``j != y`` of the multi-modal bound
    with its sign kept; ``valid`` marks correctly classified samples.
    """
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    pieces, eta, _, beta = _pairwise_terms(model, xs, ys, est)
    numer = np.sum(pieces, axis=2) + beta
    with np.errstate(over="ignore"):  # a diverged model yields inf, caught by the trainer
        denom = np.sqrt(np.sum(eta * eta, axis=2))
    own = np.zeros_like(numer, dtype=bool)
    own[np.arange(ys.size), ys] = True
    if np.any(denom[~own] == 0.0):
        raise DegenerateModelError("zero denominator for some class pair")
    with np.errstate(divide="ignore", invalid="ignore"):
        bounds = np.where(own, np.inf, numer / np.where(own, 1.0, denom))
    preds = np.argmax(logits(model, xs), axis=1)
    valid = (preds == ys) & np.all(np.where(own, 1.0, numer) > 0, axis=1)
    return np.min(bounds, axis=1), valid


def mean_radius(model, xs, ys, est) -> float:
    signed, valid = signed_bounds(model, xs, ys, est)
    return float(np.mean(signed[valid])) if np.any(valid) else 0.0


def mean_certified_radius(reports) -> float:
    """Mean multi-modal radius over the correctly classified samples."""
    radii = [r.radius_mm for r in reports if r.valid]
    return float(np.mean(radii)) if radii else 0.0


# ---------------------------------------------------------------------------
# vulnerability indicators


def vulnerability_indicators(model: MultiModalModel, est: LipschitzEstimate):
    """Indicators ``eta[m, y, j]`` and the ``K x K`` ratio ``eta[0] / eta[1]``.

    The ratio puts the first modality in the numerator; its diagonal is 1 and a
    zero denominator gives ``inf``.
    """
    K = model.K
    if model.kind == "standard":
        eta = factor_table(model) * est.tau
    else:
        a = np.stack([v[0] for v in model.head.a])  # (l, K)
        at = a * est.tau
        eta = at[:, :, None] + at[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(eta[1] > 0, eta[0] / np.where(eta[1] > 0, eta[1], 1.0), np.inf)
    ratio[np.eye(K, dtype=bool)] = 1.0
    return eta, ratio


def ratio_deviation(ratio) -> float:
    """Geometric-mean factor by which off-diagonal ratios deviate from 1."""
    ratio = np.asarray(ratio, dtype=np.float64)
    off = ~np.eye(ratio.shape[0], dtype=bool)
    return float(np.exp(np.mean(np.abs(np.log(ratio[off])))))


# ---------------------------------------------------------------------------
# serialisation


def certificate_header(n_modalities: int) -> list[str]:
    return (["id", "y", "pred", "valid", "radius_mm"]
            + [f"radius_uni_m{m + 1}" for m in range(n_modalities)]
            + ["binding_j"] + [f"eta_m{m + 1}" for m in range(n_modalities)])


def write_certificates(reports, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    l = reports[0].radius_uni.size if reports else 2
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(certificate_header(l))
        for r in reports:
            writer.writerow([r.sample_id, r.y, r.pred, int(r.valid), repr(r.radius_mm)]
                            + [repr(float(v)) for v in r.radius_uni] + [r.binding_j]
                            + [repr(float(v)) for v in r.eta])


def write_matrix(matrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            writer.writerow([repr(float(v)) for v in row])
