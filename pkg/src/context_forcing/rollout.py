"""Long self-rollout with random exit, clean context policy and the two training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distill import DmdBatch, cdmd_gradient, dmd_gradient, make_batch
from .memory import CacheConfig, SlowFastCache
from .model import (Adam, AnalyticTeacher, ChunkNet, NetScore, ScoreQuery, denoise_chunk,
                    denoising_loss_and_grad, grad_norm, update_cache)
from .numerics import DiffusionSchedule, SceneProcess, substream


class RolloutFailed(RuntimeError):
    def __init__(self, message: str, chunk: int):
        super().__init__(f"{message} at chunk {chunk}")
        self.chunk = chunk


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------


@dataclass
class CurriculumSchedule:
    L0: int
    L1: int
    s_d: int
    step: int = 0

    def __post_init__(self):
        if not 1 <= self.L0 <= self.L1:
            raise ValueError("need 1 <= L0 <= L1")
        if self.s_d < 1:
            raise ValueError("s_d must be >= 1")

    def upper(self, step: int | None = None) -> int:
        """Exclusive upper bound of the rollout-length draw at ``step``."""
        s = self.step if step is None else step
        frac = min(s, self.s_d) / self.s_d
        return int(math.floor(frac * (self.L1 - self.L0))) + self.L0 + 1


def sample_rollout_length(sched: CurriculumSchedule, rng: np.random.Generator, step: int | None = None) -> int:
    return int(rng.integers(sched.L0, sched.upper(step)))


def sample_random_exit(T: int, rng: np.random.Generator) -> int:
    if T < 1:
        raise ValueError("T must be >= 1")
    return int(rng.integers(1, T + 1))


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


@dataclass
class RolloutPlan:
    L: int
    r: int
    l: int
    c_len: int
    cond: np.ndarray

    def validate(self, T: int):
        if not 1 <= self.r <= T:
            raise ValueError(f"random exit {self.r} outside 1..{T}")
        if self.l < 1 or self.c_len < 0 or self.c_len + self.l > self.L:
            raise ValueError(f"invalid window: L={self.L} l={self.l} c_len={self.c_len}")

    @property
    def context_range(self) -> range:
        return range(self.L - self.c_len - self.l, self.L - self.l)

    @property
    def target_range(self) -> range:
        return range(self.L - self.l, self.L)

    def steps_for(self, i: int, T: int) -> int:
        return T if i in self.context_range else self.r


@dataclass
class RolloutResult:
    X: np.ndarray  # (B, L, chunk_dim) clean predictions
    plan: RolloutPlan
    step_log: list
    target_tapes: list
    target_views: list  # per target chunk, one view per trajectory
    context_views: list  # cache views at the context boundary
    caches: list = field(default_factory=list)

    @property
    def context_slice(self):
        return self.X[:, self.plan.context_range.start: self.plan.context_range.stop]

    @property
    def target_slice(self):
        return self.X[:, self.plan.L - self.plan.l:]

    @property
    def target_exit_step(self) -> int:
        return self.plan.r


def self_rollout(gen: ChunkNet, plan: RolloutPlan, sched: DiffusionSchedule, cache_config: CacheConfig,
                 frame_dim: int, seed: int, tag=(), keep_tapes: bool = True) -> RolloutResult:
    """Autoregressive rollout of ``plan.L`` chunks for every condition row.

    Chunks in the context window are fully denoised; every other chunk exits at
    ``plan.r``. Tapes are kept only for target chunks. Each chunk draws its noise
    from its own substream so re-running with a different exit leaves
    independent chunks untouched.
    """
    plan.validate(sched.T)
    cond = np.atleast_2d(plan.cond)
    B = cond.shape[0]
    caches = [SlowFastCache(cache_config) for _ in range(B)]
    X = np.zeros((B, plan.L, gen.config.chunk_dim))
    step_log, tapes, tviews = [], [], []
    ctx_views = None
    for i in range(plan.L):
        if i == plan.L - plan.l:
            ctx_views = [c.context_view() for c in caches]
        views = [c.context_view() for c in caches]
        n_steps = plan.steps_for(i, sched.T)
        is_target = keep_tapes and i >= plan.L - plan.l
        rng = substream(seed, *tag, "chunk", i)
        res = denoise_chunk(gen, sched, cond, views, n_steps, rng, keep_tape=is_target)
        x0, tape = res if is_target else (res, None)
        if not np.all(np.isfinite(x0)):
            raise RolloutFailed("non-finite chunk", i)
        X[:, i] = x0
        step_log.append(n_steps)
        if i >= plan.L - plan.l:
            tapes.append(tape)
            tviews.append(views)
        for b in range(B):
            update_cache(gen, x0[b], caches[b], i, frame_dim)
            if len(caches[b]) > cache_config.capacity:
                raise RolloutFailed("cache over capacity", i)
    return RolloutResult(X, plan, step_log, tapes, tviews, ctx_views, caches)


def split_context_target(X, plan: RolloutPlan):
    """``(X[L-c-l : L-l], X[L-l : L])`` along the chunk axis (axis 1 for batches)."""
    if plan.c_len + plan.l > plan.L or plan.l < 0 or plan.c_len < 0:
        raise ValueError("context/target window out of range")
    X = np.asarray(X)
    axis = 1 if X.ndim == 3 else 0
    idx_c = np.arange(plan.L - plan.c_len - plan.l, plan.L - plan.l)
    idx_t = np.arange(plan.L - plan.l, plan.L)
    return np.take(X, idx_c, axis=axis), np.take(X, idx_t, axis=axis)


def inference_rollout(gen: ChunkNet, sched: DiffusionSchedule, cache_config: CacheConfig, cond, n_chunks: int,
                      frame_dim: int, seed: int, tag=(), overrides: dict | None = None):
    """Generate ``n_chunks`` fully denoised chunks per condition row.

    ``overrides`` maps chunk index to a replacement chunk batch written in place
    of the generated one (used by the effective-context probe).
    """
    cond = np.atleast_2d(cond)
    B = cond.shape[0]
    caches = [SlowFastCache(cache_config) for _ in range(B)]
    X = np.zeros((B, n_chunks, gen.config.chunk_dim))
    for i in range(n_chunks):
        views = [c.context_view() for c in caches]
        x0 = denoise_chunk(gen, sched, cond, views, sched.T, substream(seed, *tag, "chunk", i))
        if overrides and i in overrides:
            x0 = np.broadcast_to(overrides[i], x0.shape).copy()
        if not np.all(np.isfinite(x0)):
            raise RolloutFailed("non-finite chunk", i)
        X[:, i] = x0
        for b in range(B):
            update_cache(gen, x0[b], caches[b], i, frame_dim)
    return X, caches


# ---------------------------------------------------------------------------
# score-model fitting helpers
# ---------------------------------------------------------------------------


def data_views(key_net: ChunkNet, chunks, cache_config: CacheConfig, frame_dim: int):
    """Cache views seen before each chunk of one trajectory; ``chunks`` is ``(n, chunk_dim)``."""
    cache = SlowFastCache(cache_config)
    views = []
    for i, ch in enumerate(chunks):
        views.append(cache.context_view())
        update_cache(key_net, ch, cache, i, frame_dim)
    return views


def fake_score_update(score: ChunkNet, samples: dict, sched: DiffusionSchedule, opt: Adam,
                      rng: np.random.Generator, lr: float | None = None):
    """One denoising-score-matching step on detached generator samples.

    ``samples`` holds ``x0`` (N, D), ``cond`` (N, dc) and ``views`` (N).
    Returns the updated network and the loss.
    """
    x0 = samples["x0"]
    if len(x0) == 0:
        raise ValueError("empty sample batch")
    t = rng.integers(1, sched.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    loss, grads, _ = denoising_loss_and_grad(score, x0, t, eps, samples["cond"], samples["views"], sched)
    if not np.isfinite(loss):
        raise TrainingDiverged("fake score loss is not finite")
    if lr == 0.0:
        return score, loss
    return score.with_params(opt.step(score.params, grads, lr)), loss


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


@dataclass
class StageConfig:
    steps: int = 300
    batch: int = 32
    lr_gen: float = 1e-3
    lr_fake: float = 2e-3
    fake_steps: int = 2
    L0: int = 5
    L1: int = 30
    s_d: int = 300
    target_len: int = 3
    c_len: int | None = None
    seed: int = 0
    lr_decay: float = 1.0  # final learning-rate multiplier, reached exponentially


def _target_batch(res: RolloutResult, plan: RolloutPlan, gen: ChunkNet, sched: DiffusionSchedule,
                  rng: np.random.Generator, contextual: bool) -> DmdBatch:
    B = plan.cond.shape[0]
    x = np.concatenate([res.X[:, i] for i in plan.target_range], axis=0)
    views = [v for tv in res.target_views for v in tv]
    cond = np.tile(plan.cond, (plan.l, 1))
    chunk_index = np.repeat(np.array(list(plan.target_range)), B)
    tapes = res.target_tapes

    def vjp(g):
        total = None
        for k, tape in enumerate(tapes):
            gk = gen.backward(tape, g[k * B:(k + 1) * B])
            total = gk if total is None else {n: total[n] + gk[n] for n in total}
        return total

    return make_batch(x, vjp, sched, rng, ScoreQuery(cond, views, chunk_index), has_context=contextual)


def _train_loop(gen: ChunkNet, fake: ChunkNet, teacher, proc: SceneProcess, sched: DiffusionSchedule,
                cache_config: CacheConfig, cfg: StageConfig, stage: str, plan_fn, callback=None):
    opt_g = Adam(cfg.lr_gen)
    opt_f = Adam(cfg.lr_fake)
    metrics = []
    for step in range(cfg.steps):
        rng = substream(cfg.seed, stage, "step", step)
        _, cond = proc.sample_identity(cfg.batch, rng)
        plan = plan_fn(step, rng, cond)
        res = self_rollout(gen, plan, sched, cache_config, proc.frame_dim, cfg.seed, (stage, step))
        batch = _target_batch(res, plan, gen, sched, rng, contextual=plan.c_len > 0 or stage == "stage2")
        fake_fn = NetScore(fake, sched)
        grad_fn = cdmd_gradient if batch.has_context else dmd_gradient
        grads = grad_fn(fake_fn, teacher, batch, sched)
        gnorm = grad_norm(grads)
        if not np.isfinite(gnorm):
            raise TrainingDiverged(f"{stage}: non-finite generator gradient at step {step}")
        decay = cfg.lr_decay ** (step / max(cfg.steps - 1, 1))
        gen = gen.with_params(opt_g.step(gen.params, grads, cfg.lr_gen * decay))
        samples = {"x0": batch.x, "cond": batch.query.cond, "views": batch.query.views}
        fake_losses = []
        for k in range(cfg.fake_steps):
            fake, fl = fake_score_update(fake, samples, sched, opt_f, substream(cfg.seed, stage, "fake", step, k),
                                         lr=cfg.lr_fake * decay)
            fake_losses.append(fl)
        counters = {}
        for c in res.caches:
            for key, v in c.counters.items():
                counters[key] = counters.get(key, 0) + v
        rec = {"stage": stage, "step": step, "L": plan.L, "r": plan.r, "l": plan.l, "c_len": plan.c_len,
               "grad_norm": gnorm, "fake_loss": float(np.mean(fake_losses)),
               "consolidated": counters.get("consolidated", 0), "evicted": counters.get("evicted", 0),
               "discarded": counters.get("discarded", 0)}
        if callback is not None:
            rec.update(callback(step, gen) or {})
        metrics.append(rec)
    return gen, fake, metrics


def train_stage1(gen: ChunkNet, fake: ChunkNet, teacher, proc: SceneProcess, sched: DiffusionSchedule,
                 cache_config: CacheConfig, cfg: StageConfig, callback=None):
    """Local distribution matching on short self-rollouts of fixed length ``L0``.

    Every chunk of the window is a target; each is scored against the teacher
    conditioned on its own prefix, which by the KL chain rule sums to the
    window-level objective (context treated as constant).
    """

    def plan_fn(step, rng, cond):
        return RolloutPlan(cfg.L0, sample_random_exit(sched.T, rng), cfg.L0, 0, cond)

    return _train_loop(gen, fake, teacher, proc, sched, cache_config, cfg, "stage1", plan_fn, callback)


def train_stage2(gen: ChunkNet, fake: ChunkNet, teacher, proc: SceneProcess, sched: DiffusionSchedule,
                 cache_config: CacheConfig, cfg: StageConfig, callback=None):
    """Contextual distribution matching on curriculum-length self-rollouts."""
    if gen is None:
        raise ValueError("stage 2 needs a stage-1 generator")
    curriculum = CurriculumSchedule(cfg.L0, cfg.L1, cfg.s_d)

    def plan_fn(step, rng, cond):
        L = sample_rollout_length(curriculum, rng, step)
        r = sample_random_exit(sched.T, rng)
        l = min(cfg.target_len, L)
        c_len = cfg.c_len if cfg.c_len is not None else int(rng.integers(1, L - l + 1)) if L > l else 0
        return RolloutPlan(L, r, l, min(c_len, L - l), cond)

    return _train_loop(gen, fake, teacher, proc, sched, cache_config, cfg, "stage2", plan_fn, callback)


def make_teacher(kind: str, proc: SceneProcess, sched: DiffusionSchedule, net: ChunkNet | None = None,
                 memoryless: bool = False):
    segments = ("fast",) if memoryless else None
    if kind == "analytic":
        return AnalyticTeacher(proc, sched, view_segments=segments)
    if net is None:
        raise ValueError("a trained teacher needs network parameters")
    return NetScore(net, sched, view_segments=segments)
