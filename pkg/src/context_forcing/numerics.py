"""Random streams, the variance-preserving forward process and Gaussian helpers.

Everything here is pure numpy. The synthetic "video" process is linear-Gaussian,
so every marginal and conditional we need has a closed form.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a tuple of labels.

    Two calls with the same arguments return bit-identical streams no matter
    which other streams were drawn in between.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            words.append(int(label) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(label).encode()))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# ---------------------------------------------------------------------------
# diffusion schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Few-step variance-preserving schedule.

    Step indices run 1..T with T the noisiest. Index 0 is the clean level and is
    accepted by :meth:`alpha_at` / :meth:`sigma_at` but carries no DMD weight.
    """

    T: int
    timesteps: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    dmd_weight: np.ndarray

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep index out of range 0..{self.T}: {t}")
        return t

    def alpha_at(self, t):
        t = self._check(t)
        return np.where(t == 0, 1.0, self.alpha[np.maximum(t, 1) - 1])

    def sigma_at(self, t):
        t = self._check(t)
        return np.where(t == 0, 0.0, self.sigma[np.maximum(t, 1) - 1])

    def weight_at(self, t):
        t = self._check(t)
        if np.any(t == 0):
            raise ValueError("the clean level has no DMD weight")
        return self.dmd_weight[t - 1]


def make_schedule(T: int = 4, kind: str = "vp", t_max: float = 0.97,
                  weighting: str = "sigma2_over_alpha") -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind != "vp":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not 0.0 < t_max < 1.0:
        raise ValueError("t_max must lie in (0, 1) so that alpha_T > 0")
    ts = t_max * np.arange(1, T + 1) / T
    alpha = np.cos(0.5 * np.pi * ts)
    sigma = np.sin(0.5 * np.pi * ts)
    if weighting == "sigma2_over_alpha":
        w = sigma**2 / alpha
    elif weighting == "unit":
        w = np.ones(T)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return DiffusionSchedule(T=T, timesteps=ts, alpha=alpha, sigma=sigma, dmd_weight=w)


def add_noise(x0, eps, t, sched: DiffusionSchedule):
    """``alpha_t * x0 + sigma_t * eps``; ``t`` may be a scalar or one index per row."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    t = np.asarray(t)
    a = sched.alpha_at(t)
    s = sched.sigma_at(t)
    if t.ndim == 1:
        a = a.reshape((-1,) + (1,) * (x0.ndim - 1))
        s = s.reshape((-1,) + (1,) * (x0.ndim - 1))
    if t.ndim == 0 and int(t) == 0:
        return x0.copy()
    return a * x0 + s * eps


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(mean.size)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x):
        x = np.atleast_2d(x)
        d = x - self.mean
        L = np.linalg.cholesky(self.cov)
        z = np.linalg.solve(L, d.T)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        return -0.5 * (np.sum(z**2, axis=0) + logdet + self.dim * np.log(2 * np.pi))

    def sample(self, n: int, rng: np.random.Generator):
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ L.T

    def diffused(self, t, sched: DiffusionSchedule) -> "GaussianDist":
        a = float(sched.alpha_at(t))
        s = float(sched.sigma_at(t))
        return GaussianDist(a * self.mean, a * a * self.cov + s * s * np.eye(self.dim))


def gaussian_marginal_score(x_t, t, clean: GaussianDist, sched: DiffusionSchedule):
    """Exact score of N(alpha_t mean, alpha_t^2 cov + sigma_t^2 I) at ``x_t`` (rows)."""
    x_t = np.asarray(x_t, dtype=float)
    a = float(sched.alpha_at(t))
    s = float(sched.sigma_at(t))
    cov = a * a * clean.cov + s * s * np.eye(clean.dim)
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - excluded by invariants
        raise RuntimeError("diffused covariance is singular") from exc
    d = (x_t - a * clean.mean).T
    sol = np.linalg.solve(c.T, np.linalg.solve(c, d))
    return -sol.T


# ---------------------------------------------------------------------------
# synthetic scene process
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Frames shaped ``(n_chunks, chunk_size, frame_dim)`` plus the latent scene."""

    frames: np.ndarray
    identity: np.ndarray
    cond: np.ndarray

    @property
    def n_chunks(self) -> int:
        return self.frames.shape[0]

    def flat_frames(self) -> np.ndarray:
        return self.frames.reshape(-1, self.frames.shape[-1])


def _default_mixing(frame_dim: int, identity_dim: int) -> np.ndarray:
    rng = substream(0, "scene-mixing", frame_dim, identity_dim)
    return rng.standard_normal((frame_dim, identity_dim))


@dataclass
class SceneProcess:
    """Linear-Gaussian stand-in for latent video.

    A scene identity ``u ~ N(0, I)`` is drawn once per trajectory. Frames follow
    an AR(1) process around ``mixing @ u``; the condition vector is a noisy
    linear read-out of ``u`` and plays the role of the text prompt.
    """

    identity_dim: int = 2
    frame_dim: int = 4
    transition: float = 0.9
    noise_scale: float = 0.15
    chunk_size: int = 3
    cond_noise: float = 1.0
    mixing: np.ndarray | None = None
    cond_projection: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.transition <= 1.0:
            raise ValueError("transition must lie in (0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.mixing is None:
            self.mixing = _default_mixing(self.frame_dim, self.identity_dim)
        self.mixing = np.asarray(self.mixing, dtype=float)
        if self.mixing.shape != (self.frame_dim, self.identity_dim):
            raise ValueError("mixing must be frame_dim x identity_dim")
        if self.cond_projection is None:
            self.cond_projection = np.eye(self.identity_dim)
        self.cond_projection = np.asarray(self.cond_projection, dtype=float)

    @property
    def cond_dim(self) -> int:
        return self.cond_projection.shape[0]

    @property
    def chunk_dim(self) -> int:
        return self.chunk_size * self.frame_dim

    def initial_var(self) -> float:
        a, s = self.transition, self.noise_scale
        return s * s / (1 - a * a) if a < 1 else s * s

    def deviation_var(self, n):
        """Per-dimension variance of the AR deviation at frame index ``n``."""
        a, s = self.transition, self.noise_scale
        n = np.asarray(n, dtype=float)
        if a < 1:
            return np.full_like(n, self.initial_var())
        return s * s * (n + 1)

    def sample_identity(self, n: int, rng: np.random.Generator):
        u = rng.standard_normal((n, self.identity_dim))
        cond = u @ self.cond_projection.T + self.cond_noise * rng.standard_normal((n, self.cond_dim))
        return u, cond

    def rollout_frames(self, u, n_frames: int, rng: np.random.Generator):
        """AR frames for a batch of identities, shape ``(B, n_frames, frame_dim)``."""
        u = np.atleast_2d(u)
        B = u.shape[0]
        mean = u @ self.mixing.T
        out = np.empty((B, n_frames, self.frame_dim))
        dev = np.sqrt(self.initial_var()) * rng.standard_normal((B, self.frame_dim))
        for n in range(n_frames):
            if n > 0:
                dev = self.transition * dev + self.noise_scale * rng.standard_normal((B, self.frame_dim))
            out[:, n] = mean + dev
        return out

    # -- closed-form conditionals ------------------------------------------

    def _dev_cov(self, ti, tj):
        ti = np.asarray(ti, dtype=float)[:, None]
        tj = np.asarray(tj, dtype=float)[None, :]
        lag = np.abs(ti - tj)
        return self.transition**lag * self.deviation_var(np.minimum(ti, tj))

    def conditional(self, ctx_frames, ctx_times, target_times, cond=None) -> GaussianDist:
        """Exact ``p(frames at target_times | frames at ctx_times, cond)``.

        Returns a Gaussian over the flattened target frames (time-major).
        """
        f = self.frame_dim
        ctx_frames = np.asarray(ctx_frames, dtype=float).reshape(-1, f)
        ctx_times = np.asarray(ctx_times, dtype=float).reshape(-1)
        target_times = np.asarray(target_times, dtype=float).reshape(-1)
        M = self.mixing
        I_f = np.eye(f)
        MMt = M @ M.T

        def frame_block(ta, tb):
            return np.kron(np.ones((len(ta), len(tb))), MMt) + np.kron(self._dev_cov(ta, tb), I_f)

        S_oo = frame_block(ctx_times, ctx_times)
        S_to = frame_block(target_times, ctx_times)
        S_tt = frame_block(target_times, target_times)
        y = ctx_frames.reshape(-1)
        if cond is not None:
            P = self.cond_projection
            MPt = np.tile(M @ P.T, (len(ctx_times), 1))
            C_cc = P @ P.T + self.cond_noise**2 * np.eye(P.shape[0])
            S_oo = np.block([[S_oo, MPt], [MPt.T, C_cc]])
            S_to = np.hstack([S_to, np.tile(M @ P.T, (len(target_times), 1))])
            y = np.concatenate([y, np.asarray(cond, dtype=float).reshape(-1)])
        if y.size == 0:
            return GaussianDist(np.zeros(S_tt.shape[0]), S_tt)
        L = np.linalg.cholesky(S_oo)
        A = np.linalg.solve(L.T, np.linalg.solve(L, S_to.T)).T
        mean = A @ y
        cov = S_tt - A @ S_to.T
        return GaussianDist(mean, 0.5 * (cov + cov.T))

    def frame_marginal(self, times) -> GaussianDist:
        return self.conditional(np.zeros((0, self.frame_dim)), [], times)


def sample_trajectory(proc: SceneProcess, n_chunks: int, rng: np.random.Generator,
                      batch: int | None = None):
    """Draw ``batch`` trajectories (or a single one when ``batch`` is None)."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    B = 1 if batch is None else batch
    u, cond = proc.sample_identity(B, rng)
    frames = proc.rollout_frames(u, n_chunks * proc.chunk_size, rng)
    frames = frames.reshape(B, n_chunks, proc.chunk_size, proc.frame_dim)
    if batch is None:
        return Trajectory(frames[0], u[0], cond[0])
    return [Trajectory(frames[b], u[b], cond[b]) for b in range(B)]
