"""Context-teacher training: plain denoising pretraining and error-recycling fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory import CacheConfig
from .model import Adam, ChunkNet, PaddedContext, denoising_loss_and_grad
from .numerics import DiffusionSchedule, SceneProcess, substream
from .rollout import TrainingDiverged, data_views


@dataclass(frozen=True)
class PerturbationConfig:
    bernoulli_p: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.bernoulli_p <= 1.0:
            raise ValueError("bernoulli_p must lie in [0, 1]")
        if self.scale < 0:
            raise ValueError("scale must be >= 0")


@dataclass
class ErrorBank:
    """Ring buffer of past per-chunk residuals (prediction minus target)."""

    capacity: int = 256
    residuals: list = field(default_factory=list)
    insertions: int = 0

    def __len__(self) -> int:
        return len(self.residuals)

    def push(self, residual):
        residual = np.array(residual, dtype=float)
        if self.residuals and residual.shape != self.residuals[0].shape:
            raise ValueError(f"residual shape {residual.shape} != {self.residuals[0].shape}")
        if len(self.residuals) < self.capacity:
            self.residuals.append(residual)
        else:
            self.residuals[self.insertions % self.capacity] = residual
        self.insertions += 1

    def sample(self, rng: np.random.Generator):
        return self.residuals[int(rng.integers(len(self.residuals)))]

    def state(self) -> dict:
        return {"capacity": self.capacity, "insertions": self.insertions,
                "residuals": np.array(self.residuals)}

    @classmethod
    def from_state(cls, state: dict) -> "ErrorBank":
        bank = cls(int(state["capacity"]))
        bank.residuals = [np.array(r) for r in state["residuals"]]
        bank.insertions = int(state["insertions"])
        return bank


def capture_residual(bank: ErrorBank, prediction, target):
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    bank.push(prediction - target)


def perturb_context(X_ctx, bank: ErrorBank, cfg: PerturbationConfig, rng: np.random.Generator):
    """Add ``scale * e`` to each chunk independently with probability ``bernoulli_p``.

    ``e`` is drawn uniformly from the bank. Draws are made even when the result
    is the identity so that the random stream does not depend on the bank size.
    """
    X = np.array(X_ctx, dtype=float)
    flips = rng.random(len(X)) < cfg.bernoulli_p
    picks = rng.integers(0, max(len(bank), 1), size=len(X))
    if len(bank) == 0 or cfg.scale == 0.0 or cfg.bernoulli_p == 0.0:
        return X
    for i in np.flatnonzero(flips):
        X[i] = X[i] + cfg.scale * bank.residuals[picks[i]].reshape(X[i].shape)
    return X


def _examples(net: ChunkNet, clean, ctx_chunks, cond, cache_config: CacheConfig, frame_dim: int):
    """Flatten trajectories into (target chunk, cache view before it) training pairs."""
    x0, conds, views = [], [], []
    for b in range(len(clean)):
        vs = data_views(net, ctx_chunks[b], cache_config, frame_dim)
        x0.append(clean[b])
        conds.append(np.repeat(cond[b][None], len(clean[b]), axis=0))
        views.extend(vs)
    return np.concatenate(x0), np.concatenate(conds), views


def erft_step(teacher: ChunkNet, batch: dict, bank: ErrorBank, cfg: PerturbationConfig, opt: Adam,
              sched: DiffusionSchedule, cache_config: CacheConfig, frame_dim: int, rng: np.random.Generator,
              lr: float | None = None, recycle: bool = True):
    """One robust fine-tuning step.

    ``batch`` holds clean ``chunks`` (B, n, D) and ``cond`` (B, dc). Contexts are
    perturbed with recycled residuals; the regression target stays the clean
    chunk. Fresh residuals are pushed back into the bank.
    """
    chunks = np.asarray(batch["chunks"], dtype=float)
    perturbed = np.stack([perturb_context(c, bank, cfg, rng) for c in chunks])
    x0, cond, views = _examples(teacher, chunks, perturbed, batch["cond"], cache_config, frame_dim)
    t = rng.integers(1, sched.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    loss, grads, pred = denoising_loss_and_grad(teacher, x0, t, eps, cond, views, sched)
    if not np.isfinite(loss):
        raise TrainingDiverged("teacher loss is not finite")
    if recycle:
        for k in rng.choice(len(x0), size=min(len(x0), 8), replace=False):
            capture_residual(bank, pred[k], x0[k])
    if lr == 0.0:
        return teacher, loss
    return teacher.with_params(opt.step(teacher.params, grads, lr)), loss


def fit_denoiser(net: ChunkNet, proc: SceneProcess, sched: DiffusionSchedule, cache_config: CacheConfig,
                 steps: int, n_chunks: int, batch: int = 16, lr: float = 3e-3, seed: int = 0, tag: str = "fit",
                 bank: ErrorBank | None = None, perturbation: PerturbationConfig | None = None,
                 lr_decay: bool = True):
    """Denoising regression on ground-truth trajectories of ``n_chunks`` chunks.

    With ``perturbation`` set this is error-recycling fine-tuning; otherwise it
    is plain pretraining (the bank is still filled so later fine-tunes can reuse it).
    """
    bank = bank if bank is not None else ErrorBank()
    pcfg = perturbation or PerturbationConfig(bernoulli_p=0.0)
    opt = Adam(lr)
    losses = []
    for step in range(steps):
        rng = substream(seed, tag, "step", step)
        ident, cond = proc.sample_identity(batch, rng)
        frames = proc.rollout_frames(ident, n_chunks * proc.chunk_size, rng)
        chunks = frames.reshape(batch, n_chunks, proc.chunk_dim)
        cur_lr = lr * (0.1 ** (step / max(steps, 1))) if lr_decay else lr
        net, loss = erft_step(net, {"chunks": chunks, "cond": cond}, bank, pcfg, opt, sched, cache_config,
                              proc.frame_dim, rng, lr=cur_lr)
        losses.append(loss)
    return net, losses, bank


def continuation_error(teacher, proc: SceneProcess, sched: DiffusionSchedule, cache_config: CacheConfig,
                       n_chunks: int, n_traj: int, seed: int, bank: ErrorBank | None = None,
                       perturbation: PerturbationConfig | None = None) -> float:
    """Mean x0-prediction error on the last chunk of held-out trajectories.

    Contexts are optionally perturbed with ``bank`` residuals; every diffusion
    step is evaluated with a shared noise draw so paired comparisons are exact.
    """
    rng = substream(seed, "heldout")
    ident, cond = proc.sample_identity(n_traj, rng)
    frames = proc.rollout_frames(ident, n_chunks * proc.chunk_size, rng)
    chunks = frames.reshape(n_traj, n_chunks, proc.chunk_dim)
    if bank is not None and perturbation is not None:
        prng = substream(seed, "perturb")
        ctx = np.stack([perturb_context(c, bank, perturbation, prng) for c in chunks])
    else:
        ctx = chunks
    net = teacher.net if hasattr(teacher, "net") else teacher
    views = [data_views(net, ctx[b], cache_config, proc.frame_dim)[-1] for b in range(n_traj)]
    target = chunks[:, -1]
    eps = substream(seed, "eps").standard_normal(target.shape)
    ctxp = PaddedContext.from_views(views, net.config.token_dim)
    errs = []
    for j in range(1, sched.T + 1):
        x_t = float(sched.alpha_at(j)) * target + float(sched.sigma_at(j)) * eps
        pred = net.forward(x_t, j, cond, ctxp)
        errs.append(np.mean(np.sum((pred - target) ** 2, axis=1)))
    return float(np.mean(errs))
