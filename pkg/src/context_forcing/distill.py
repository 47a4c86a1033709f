"""Distribution-matching gradients and closed-form KL oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import DiffusionSchedule, GaussianDist, add_noise


class NumericError(FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (sample {index})")
        self.index = index


@dataclass
class DmdBatch:
    """Generator samples with a retained path for the vector-Jacobian product.

    ``vjp(g)`` returns ``sum_b g_b^T dx_b/dtheta``. ``query`` is handed to both
    score models unchanged; for contextual batches it carries the student's own
    cache views.
    """

    x: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    vjp: Callable
    query: object = None
    has_context: bool = False

    @property
    def x_t(self):
        return self._x_t

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.t = np.broadcast_to(np.asarray(self.t, dtype=int), (len(self.x),)).copy()
        self.eps = np.asarray(self.eps, dtype=float).reshape(self.x.shape)
        self._sched = None
        self._x_t = None

    def diffuse(self, sched: DiffusionSchedule) -> "DmdBatch":
        self._sched = sched
        self._x_t = add_noise(self.x, self.eps, self.t, sched)
        return self


def make_batch(x, vjp, sched: DiffusionSchedule, rng: np.random.Generator, query=None,
               has_context: bool = False) -> DmdBatch:
    """Diffuse generator samples at uniformly drawn steps 1..T."""
    x = np.atleast_2d(x)
    t = rng.integers(1, sched.T + 1, size=len(x))
    eps = rng.standard_normal(x.shape)
    return DmdBatch(x, t, eps, vjp, query, has_context).diffuse(sched)


def _score_difference(fake, teacher, batch: DmdBatch, sched: DiffusionSchedule):
    if batch.x_t is None:
        batch.diffuse(sched)
    s_fake = np.asarray(fake(batch.x_t, batch.t, batch.query), dtype=float)
    s_real = np.asarray(teacher(batch.x_t, batch.t, batch.query), dtype=float)
    for name, s in (("fake", s_fake), ("teacher", s_real)):
        bad = ~np.all(np.isfinite(s), axis=1)
        if bad.any():
            raise NumericError(f"non-finite {name} score", int(np.argmax(bad)))
    w = sched.weight_at(batch.t) * sched.alpha_at(batch.t)
    return w[:, None] * (s_fake - s_real)


def _mean_vjp(batch: DmdBatch, g):
    out = batch.vjp(g)
    n = len(batch.x)
    if isinstance(out, dict):
        return {k: v / n for k, v in out.items()}
    return np.asarray(out) / n


def dmd_gradient(fake, teacher, batch: DmdBatch, sched: DiffusionSchedule):
    """Monte-Carlo distribution-matching gradient.

    Each sample's weighted score gap ``w_t alpha_t (s_fake - s_teacher)(x_t)`` is
    pulled back through the generator and averaged over the batch.
    """
    g = _score_difference(fake, teacher, batch, sched)
    return _mean_vjp(batch, g)


def cdmd_gradient(fake, teacher, batch: DmdBatch, sched: DiffusionSchedule):
    """Contextual variant: both scores see the same student-generated context.

    The context enters as a constant; only the continuation's generation path
    is differentiated.
    """
    if not batch.has_context or batch.query is None:
        raise ValueError("contextual DMD needs a context view for every sample")
    return dmd_gradient(fake, teacher, batch, sched)


def dmd_surrogate_loss(fake, teacher, batch: DmdBatch, sched: DiffusionSchedule) -> float:
    """Scalar whose gradient equals :func:`dmd_gradient`; useful for logging."""
    g = _score_difference(fake, teacher, batch, sched)
    return float(np.sum(g * batch.x) / len(batch.x))


# ---------------------------------------------------------------------------
# KL oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KlEstimate:
    value: float
    std_error: float = 0.0
    method: str = "closed-form"


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> KlEstimate:
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    try:
        Lq = np.linalg.cholesky(q.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("q covariance is singular") from exc
    Lp = np.linalg.cholesky(p.cov)
    A = np.linalg.solve(Lq, Lp)
    d = np.linalg.solve(Lq, q.mean - p.mean)
    val = 0.5 * (np.sum(A**2) + d @ d - p.dim
                 + 2 * np.log(np.diag(Lq)).sum() - 2 * np.log(np.diag(Lp)).sum())
    return KlEstimate(float(max(val, 0.0)), 0.0, "closed-form")


def kl_monte_carlo(p: GaussianDist, q: GaussianDist, n: int, rng: np.random.Generator) -> KlEstimate:
    x = p.sample(n, rng)
    r = p.logpdf(x) - q.logpdf(x)
    return KlEstimate(float(r.mean()), float(r.std(ddof=1) / np.sqrt(n)), "monte-carlo")


def _split(dist: GaussianDist, k: int):
    m, S = dist.mean, dist.cov
    return m[:k], m[k:], S[:k, :k], S[:k, k:], S[k:, k:]


def expected_conditional_kl(p: GaussianDist, q: GaussianDist, k: int) -> KlEstimate:
    """``E_{x1 ~ p}[KL(p(x2 | x1) || q(x2 | x1))]`` for a split after coordinate ``k``."""
    pm1, pm2, p11, p12, p22 = _split(p, k)
    qm1, qm2, q11, q12, q22 = _split(q, k)
    Bp = np.linalg.solve(p11, p12).T
    Bq = np.linalg.solve(q11, q12).T
    Sp = p22 - Bp @ p12
    Sq = q22 - Bq @ q12
    c = pm2 - qm2 - Bq @ (pm1 - qm1)
    dB = Bp - Bq
    Sq_inv = np.linalg.inv(Sq)
    d = len(pm2)
    quad = c @ Sq_inv @ c + np.trace(Sq_inv @ dB @ p11 @ dB.T)
    _, ld_q = np.linalg.slogdet(Sq)
    _, ld_p = np.linalg.slogdet(Sp)
    val = 0.5 * (np.trace(Sq_inv @ Sp) - d + ld_q - ld_p + quad)
    return KlEstimate(float(val), 0.0, "closed-form")


def kl_decomposition_check(p_model: GaussianDist, p_ref: GaussianDist, k: int, tol: float = 1e-9):
    """Closed-form (global, local, expected-conditional) KL terms for a split at ``k``.

    The three terms are computed by independent routes; their additivity is
    asserted to ``tol`` (scaled by the magnitude of the global term).
    """
    if p_model.dim != p_ref.dim:
        raise ValueError("dimension mismatch")
    if not 0 < k < p_model.dim:
        raise ValueError("split must leave both blocks non-empty")
    glob = kl_gaussian(p_model, p_ref)
    pm1, _, p11, _, _ = _split(p_model, k)
    qm1, _, q11, _, _ = _split(p_ref, k)
    local = kl_gaussian(GaussianDist(pm1, p11), GaussianDist(qm1, q11))
    cond = expected_conditional_kl(p_model, p_ref, k)
    gap = abs(glob.value - (local.value + cond.value))
    if gap > tol * max(1.0, glob.value):
        raise AssertionError(f"KL chain rule violated by {gap:.3e}")
    return glob, local, cond
