"""Window-based consistency curves, the effective-context probe and alignment scores.

Time mapping: one chunk stands for one second, a mark ``m`` refers to the
``m``-th chunk (index ``m - 1``) and the +-0.5 s window shrinks to that chunk's
frames.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .memory import CacheConfig
from .model import ChunkNet
from .numerics import DiffusionSchedule, SceneProcess, Trajectory, substream
from .rollout import inference_rollout


def _as_frames(traj) -> np.ndarray:
    frames = traj.frames if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if frames.ndim != 3:
        raise ValueError("expected frames shaped (n_chunks, chunk_size, frame_dim)")
    return frames


def _cos_rows(ref, rows):
    ref = np.asarray(ref, dtype=float)
    rows = np.atleast_2d(rows)
    num = rows @ ref
    den = np.linalg.norm(rows, axis=1) * np.linalg.norm(ref)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(out, -1.0, 1.0)


def window_consistency(traj, t: int, half_window: int, ref) -> float:
    """Mean cosine between ``ref`` and every frame of chunks ``t-h .. t+h`` that exist."""
    frames = _as_frames(traj)
    lo, hi = max(t - half_window, 0), min(t + half_window, frames.shape[0] - 1)
    if lo > hi:
        raise ValueError(f"window around chunk {t} does not intersect the trajectory")
    window = frames[lo: hi + 1].reshape(-1, frames.shape[-1])
    return float(np.mean(_cos_rows(ref, window)))


@dataclass
class ConsistencyCurve:
    marks: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    per_seed: np.ndarray  # (n_seeds, n_marks)

    @property
    def seeds(self) -> int:
        return self.per_seed.shape[0]

    def at(self, mark: int) -> float:
        return float(self.mean[list(self.marks).index(mark)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("mark,mean,std,seeds\n")
        for m, mu, sd in zip(self.marks, self.mean, self.std):
            buf.write(f"{int(m)},{float(mu)!r},{float(sd)!r},{self.seeds}\n")
        return buf.getvalue()


def consistency_curve(gen: ChunkNet, proc: SceneProcess, sched: DiffusionSchedule, cache_config: CacheConfig,
                      n_chunks: int = 60, marks=(10, 20, 30, 40, 50, 60), seeds=(0, 1, 2, 3, 4),
                      n_prompts: int = 32, half_window: int = 0, master_seed: int = 0) -> ConsistencyCurve:
    """Roll out the model from fresh prompts and score each mark against frame ``V_0``."""
    marks = np.asarray(marks, dtype=int)
    if marks.max() > n_chunks or marks.min() < 1:
        raise ValueError("marks must lie within 1..n_chunks")
    rows = []
    for seed in seeds:
        rng = substream(master_seed, "eval-prompts", seed)
        _, cond = proc.sample_identity(n_prompts, rng)
        X, _ = inference_rollout(gen, sched, cache_config, cond, n_chunks, proc.frame_dim,
                                 master_seed, ("eval", seed))
        frames = X.reshape(n_prompts, n_chunks, proc.chunk_size, proc.frame_dim)
        rows.append([np.mean([window_consistency(frames[b], m - 1, half_window, frames[b, 0, 0])
                              for b in range(n_prompts)]) for m in marks])
    per_seed = np.array(rows)
    return ConsistencyCurve(marks, per_seed.mean(axis=0), per_seed.std(axis=0), per_seed)


def data_consistency_curve(proc: SceneProcess, n_chunks: int = 60, marks=(10, 20, 30, 40, 50, 60),
                           n_traj: int = 256, seed: int = 0) -> np.ndarray:
    """Reference values of the same protocol on ground-truth trajectories."""
    rng = substream(seed, "data-curve")
    u, _ = proc.sample_identity(n_traj, rng)
    frames = proc.rollout_frames(u, n_chunks * proc.chunk_size, rng)
    frames = frames.reshape(n_traj, n_chunks, proc.chunk_size, proc.frame_dim)
    return np.array([np.mean([window_consistency(frames[b], m - 1, 0, frames[b, 0, 0]) for b in range(n_traj)])
                     for m in marks])


@dataclass
class ProbeResult:
    delays: np.ndarray
    recall: np.ndarray  # (n_seeds, n_delays)
    baseline: np.ndarray  # same rollouts without the event

    @property
    def mean(self):
        return self.recall.mean(axis=0)


def effective_context_probe(gen: ChunkNet, proc: SceneProcess, sched: DiffusionSchedule,
                            cache_config: CacheConfig, event_chunk, delays, event_at: int = 2,
                            seeds=tuple(range(20)), n_prompts: int = 16, master_seed: int = 0) -> ProbeResult:
    """Write ``event_chunk`` into the stream at chunk ``event_at`` and measure how much
    later generations still resemble it.

    Recall at delay ``d`` is the mean cosine between the event's mean frame and
    the frames of chunk ``event_at + d``. The same prompts and noise are replayed
    without the event to give a paired baseline.
    """
    delays = np.asarray(delays, dtype=int)
    if delays.min() < 0:
        raise ValueError("delays must be >= 0")
    event_chunk = np.asarray(event_chunk, dtype=float).reshape(proc.chunk_dim)
    ref = event_chunk.reshape(proc.chunk_size, proc.frame_dim).mean(axis=0)
    n_chunks = event_at + int(delays.max()) + 1
    rec, base = [], []
    for seed in seeds:
        _, cond = proc.sample_identity(n_prompts, substream(master_seed, "probe-prompts", seed))
        out = []
        for overrides in ({event_at: event_chunk}, None):
            X, _ = inference_rollout(gen, sched, cache_config, cond, n_chunks, proc.frame_dim, master_seed,
                                     ("probe", seed), overrides=overrides)
            frames = X.reshape(n_prompts, n_chunks, proc.chunk_size, proc.frame_dim)
            out.append([np.mean([window_consistency(frames[b], event_at + d, 0, ref) for b in range(n_prompts)])
                        for d in delays])
        rec.append(out[0])
        base.append(out[1])
    return ProbeResult(delays, np.array(rec), np.array(base))


def semantic_alignment(traj, cond, proc: SceneProcess) -> float:
    """Cosine between the condition and the trajectory's mean frame mapped back to condition space."""
    frames = _as_frames(traj)
    mean_frame = frames.reshape(-1, frames.shape[-1]).mean(axis=0)
    identity_hat = np.linalg.pinv(proc.mixing) @ mean_frame
    proj = proc.cond_projection @ identity_hat
    return float(_cos_rows(np.asarray(cond, dtype=float), proj[None])[0])
