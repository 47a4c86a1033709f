"""Causal chunk generator, fake score and context teacher.

All learned roles share :class:`ChunkNet`: a two-layer residual perceptron fed
by attention heads over the cache view. Keys carry additive sinusoidal
embeddings of the (bounded) cache positions; birth indices never reach the
network. Gradients are derived by hand and checked against finite differences
in the test-suite.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .memory import CacheConfig, ContextView, SlowFastCache, TokenEntry
from .numerics import DiffusionSchedule, GaussianDist, SceneProcess, add_noise

ROLES = ("generator", "fake", "teacher")


@dataclass(frozen=True)
class NetConfig:
    chunk_dim: int
    token_dim: int
    cond_dim: int
    T: int
    head_dim: int = 8
    n_heads: int = 2
    hidden: int = 32
    pe_base: float = 100.0

    @property
    def in_dim(self) -> int:
        return self.chunk_dim + self.cond_dim

    @property
    def u_dim(self) -> int:
        return self.in_dim + self.n_heads * self.head_dim

    def shapes(self) -> dict:
        H, h = self.n_heads, self.head_dim
        return {
            "Wq": (H, h, self.in_dim),
            "bq": (H, self.T, h),
            "Wk": (H, h, self.token_dim),
            "Wv": (H, h, self.token_dim),
            "W1": (self.hidden, self.u_dim),
            "b1": (self.hidden,),
            "W2": (self.chunk_dim, self.hidden),
            "A": (self.T, self.chunk_dim, self.u_dim),
            "A0": (self.T, self.chunk_dim, self.in_dim),
            "b2": (self.T, self.chunk_dim),
        }


def sinusoidal(pos, dim: int, base: float = 100.0) -> np.ndarray:
    pos = np.asarray(pos, dtype=float)[..., None]
    i = np.arange(dim // 2)
    freq = base ** (-2.0 * i / dim)
    out = np.zeros(pos.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(pos * freq)
    out[..., 1::2] = np.cos(pos * freq)[..., : dim // 2]
    return out


@dataclass(frozen=True)
class PaddedContext:
    payloads: np.ndarray  # (B, n, token_dim)
    positions: np.ndarray  # (B, n)
    mask: np.ndarray  # (B, n) bool

    @classmethod
    def from_views(cls, views, token_dim: int) -> "PaddedContext":
        B = len(views)
        n = max([len(v) for v in views] + [0])
        P = np.zeros((B, max(n, 1), token_dim))
        pos = np.zeros((B, max(n, 1)), dtype=int)
        mask = np.zeros((B, max(n, 1)), dtype=bool)
        for b, v in enumerate(views):
            k = len(v)
            if k:
                P[b, :k] = v.payloads
                pos[b, :k] = v.positions
                mask[b, :k] = True
        return cls(P, pos, mask)

    @classmethod
    def empty(cls, B: int, token_dim: int) -> "PaddedContext":
        return cls(np.zeros((B, 1, token_dim)), np.zeros((B, 1), dtype=int), np.zeros((B, 1), dtype=bool))


class ChunkNet:
    """Network value object. Training code builds new instances instead of mutating."""

    def __init__(self, config: NetConfig, params: dict, role: str = "generator"):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.config = config
        self.role = role
        shapes = config.shapes()
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(params[name])):
                raise ValueError(f"parameter {name} is not finite")
        self.params = {k: np.asarray(params[k], dtype=float) for k in shapes}

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator, role: str = "generator", scale: float = 0.3):
        params = {}
        for name, shape in config.shapes().items():
            if name.startswith("b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[-1]
                params[name] = scale * rng.standard_normal(shape) / np.sqrt(fan_in)
        return cls(config, params, role)

    def with_params(self, params: dict) -> "ChunkNet":
        return ChunkNet(self.config, params, self.role)

    def as_role(self, role: str) -> "ChunkNet":
        return ChunkNet(self.config, {k: v.copy() for k, v in self.params.items()}, role)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward / backward -------------------------------------------------

    def forward(self, x, t, cond, ctx: PaddedContext, keep_tape: bool = False):
        c = self.config
        p = self.params
        x = np.atleast_2d(x)
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=int), (B,))
        if np.any(t < 1) or np.any(t > c.T):
            raise ValueError("network timestep index must lie in 1..T")
        if x.shape[1] != c.chunk_dim:
            raise ValueError(f"chunk dimension {x.shape[1]} != {c.chunk_dim}")
        ti = t - 1
        inp = np.concatenate([x, np.atleast_2d(cond)], axis=1)
        pe = sinusoidal(ctx.positions, c.head_dim, c.pe_base)
        scale = 1.0 / np.sqrt(c.head_dim)
        has_ctx = ctx.mask.any(axis=1, keepdims=True)
        heads = []
        reads = []
        for hd in range(c.n_heads):
            q = inp @ p["Wq"][hd].T + p["bq"][hd][ti]
            K = ctx.payloads @ p["Wk"][hd].T + pe
            V = ctx.payloads @ p["Wv"][hd].T
            sc = np.einsum("bnh,bh->bn", K, q) * scale
            sc = np.where(ctx.mask, sc, -np.inf)
            sc = sc - np.where(has_ctx, sc.max(axis=1, keepdims=True), 0.0)
            e = np.where(ctx.mask, np.exp(sc), 0.0)
            a = e / np.where(has_ctx, e.sum(axis=1, keepdims=True), 1.0)
            r = np.einsum("bn,bnh->bh", a, V)
            heads.append((q, K, V, a))
            reads.append(r)
        u = np.concatenate([inp] + reads, axis=1)
        h1 = np.tanh(u @ p["W1"].T + p["b1"])
        At = p["A"][ti]
        out = np.einsum("bdu,bu->bd", At, u) + h1 @ p["W2"].T + p["b2"][ti]
        # first chunk of a stream: the prior is much wider, so it gets its own linear head
        empty = ~has_ctx[:, 0]
        out = out + empty[:, None] * np.einsum("bdi,bi->bd", p["A0"][ti], inp)
        if keep_tape:
            return out, dict(inp=inp, u=u, h1=h1, heads=heads, ti=ti, ctx=ctx, scale=scale, empty=empty)
        return out

    def backward(self, tape: dict, g) -> dict:
        """Vector-Jacobian product: sum over rows of ``g_b^T d out_b / d params``."""
        c = self.config
        p = self.params
        g = np.asarray(g, dtype=float)
        u, h1, inp, ti = tape["u"], tape["h1"], tape["inp"], tape["ti"]
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        np.add.at(grads["A"], ti, np.einsum("bd,bu->bdu", g, u))
        np.add.at(grads["b2"], ti, g)
        np.add.at(grads["A0"], ti, np.einsum("bd,bi->bdi", g * tape["empty"][:, None], inp))
        grads["W2"] = g.T @ h1
        dz1 = (g @ p["W2"]) * (1.0 - h1**2)
        grads["W1"] = dz1.T @ u
        grads["b1"] = dz1.sum(axis=0)
        du = dz1 @ p["W1"] + np.einsum("bdu,bd->bu", p["A"][ti], g)
        P = tape["ctx"].payloads
        h = c.head_dim
        for hd, (q, K, V, a) in enumerate(tape["heads"]):
            dr = du[:, c.in_dim + hd * h: c.in_dim + (hd + 1) * h]
            da = np.einsum("bh,bnh->bn", dr, V)
            dV = np.einsum("bn,bh->bnh", a, dr)
            dsc = a * (da - np.sum(a * da, axis=1, keepdims=True)) * tape["scale"]
            dq = np.einsum("bn,bnh->bh", dsc, K)
            dK = np.einsum("bn,bh->bnh", dsc, q)
            grads["Wk"][hd] = np.einsum("bnh,bnf->hf", dK, P)
            grads["Wv"][hd] = np.einsum("bnh,bnf->hf", dV, P)
            grads["Wq"][hd] = dq.T @ inp
            np.add.at(grads["bq"][hd], ti, dq)
        return grads

    # -- cache keys ---------------------------------------------------------

    def token_keys(self, frames):
        return np.asarray(frames) @ self.params["Wk"][0].T

    def token_values(self, frames):
        return np.asarray(frames) @ self.params["Wv"][0].T


# ---------------------------------------------------------------------------
# role helpers
# ---------------------------------------------------------------------------


def x0_to_score(x0_pred, x_t, t, sched: DiffusionSchedule):
    a = sched.alpha_at(t)[:, None] if np.ndim(t) else sched.alpha_at(t)
    s = sched.sigma_at(t)[:, None] if np.ndim(t) else sched.sigma_at(t)
    return (a * x0_pred - x_t) / s**2


@dataclass
class ScoreQuery:
    """Everything a score model may condition on for a batch of chunks."""

    cond: np.ndarray
    views: list
    chunk_index: np.ndarray

    def __len__(self):
        return len(self.views)


class NetScore:
    """Score read-out of an x0-predicting :class:`ChunkNet` (fake score or trained teacher)."""

    def __init__(self, net: ChunkNet, sched: DiffusionSchedule, view_segments=None):
        self.net = net
        self.sched = sched
        self.view_segments = view_segments

    def _ctx(self, query: ScoreQuery):
        views = query.views
        if self.view_segments is not None:
            views = [v.restrict(self.view_segments) for v in views]
        return PaddedContext.from_views(views, self.net.config.token_dim)

    def predict_x0(self, x_t, t, query: ScoreQuery):
        return self.net.forward(x_t, t, query.cond, self._ctx(query))

    def __call__(self, x_t, t, query: ScoreQuery):
        t = np.broadcast_to(np.asarray(t, dtype=int), (len(x_t),))
        return x0_to_score(self.predict_x0(x_t, t, query), x_t, t, self.sched)


class AnalyticTeacher:
    """Exact diffused score of the data continuation given the cached frames.

    Uses birth indices to place context frames in time; it is an oracle of the
    data process, not a network, so the bounded-position contract does not
    apply. ``view_segments`` restricts what the teacher sees (e.g. ``("fast",)``
    for a memoryless teacher).
    """

    def __init__(self, proc: SceneProcess, sched: DiffusionSchedule, view_segments=None,
                 use_cond: bool = True):
        self.proc = proc
        self.sched = sched
        self.view_segments = view_segments
        self.use_cond = use_cond

    def conditional(self, view: ContextView, chunk_index: int, cond=None) -> GaussianDist:
        if self.view_segments is not None:
            view = view.restrict(self.view_segments)
        cs = self.proc.chunk_size
        times = chunk_index * cs + np.arange(cs)
        frames = view.payloads if len(view) else np.zeros((0, self.proc.frame_dim))
        return self.proc.conditional(frames, view.births, times, cond if self.use_cond else None)

    def __call__(self, x_t, t, query: ScoreQuery):
        t = np.broadcast_to(np.asarray(t, dtype=int), (len(x_t),))
        out = np.empty_like(np.asarray(x_t, dtype=float))
        for b in range(len(x_t)):
            dist = self.conditional(query.views[b], int(query.chunk_index[b]), query.cond[b])
            a = float(self.sched.alpha_at(t[b]))
            s = float(self.sched.sigma_at(t[b]))
            cov = a * a * dist.cov + s * s * np.eye(dist.dim)
            out[b] = -np.linalg.solve(cov, x_t[b] - a * dist.mean)
        return out

    def predict_x0(self, x_t, t, query: ScoreQuery):
        t = np.broadcast_to(np.asarray(t, dtype=int), (len(x_t),))
        s = self(x_t, t, query)
        a = self.sched.alpha_at(t)[:, None]
        sig = self.sched.sigma_at(t)[:, None]
        return (x_t + sig**2 * s) / a


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_chunk(gen: ChunkNet, x_noisy, t, cond, views, keep_tape: bool = False):
    """Predict the clean chunk from ``x_noisy`` at step ``t`` given each row's cache view."""
    ctx = PaddedContext.from_views(views, gen.config.token_dim)
    return gen.forward(x_noisy, t, cond, ctx, keep_tape=keep_tape)


def update_cache(gen: ChunkNet, x0_chunk, cache: SlowFastCache, chunk_index: int, frame_dim: int):
    """Append one clean chunk to ``cache``; keys and values come from the clean frames."""
    frames = np.asarray(x0_chunk, dtype=float).reshape(-1, frame_dim)
    keys = gen.token_keys(frames)
    values = gen.token_values(frames)
    cs = frames.shape[0]
    entries = [TokenEntry(keys[i], values[i], frames[i].copy(), chunk_index * cs + i, chunk_index)
               for i in range(cs)]
    return cache.append_chunk(entries)


def denoise_chunk(gen: ChunkNet, sched: DiffusionSchedule, cond, views, n_steps: int,
                  rng: np.random.Generator, keep_tape: bool = False):
    """Run ``n_steps`` few-step denoising steps from pure noise, re-noising in between.

    Step ``s`` (1-based) uses schedule index ``T - s + 1``. Returns the exit-step
    clean prediction (and its tape when requested).
    """
    if not 1 <= n_steps <= sched.T:
        raise ValueError(f"n_steps must lie in 1..{sched.T}")
    cond = np.atleast_2d(cond)
    B = cond.shape[0]
    D = gen.config.chunk_dim
    ctx = PaddedContext.from_views(views, gen.config.token_dim)
    x = rng.standard_normal((B, D))
    tape = None
    for s in range(1, n_steps + 1):
        j = sched.T - s + 1
        last = s == n_steps
        res = gen.forward(x, j, cond, ctx, keep_tape=keep_tape and last)
        x0, tape = res if (keep_tape and last) else (res, None)
        if not last:
            x = add_noise(x0, rng.standard_normal((B, D)), j - 1, sched)
    return (x0, tape) if keep_tape else x0


def score_sample(score, sched: DiffusionSchedule, query: ScoreQuery, rng: np.random.Generator, D: int):
    """Ancestral (DDPM-posterior) sampling with an x0-predicting score model."""
    B = len(query)
    x = rng.standard_normal((B, D))
    for j in range(sched.T, 0, -1):
        x0 = score.predict_x0(x, np.full(B, j), query)
        if j == 1:
            return x0
        a, s = float(sched.alpha_at(j)), float(sched.sigma_at(j))
        a1, s1 = float(sched.alpha_at(j - 1)), float(sched.sigma_at(j - 1))
        eps_hat = (x - a * x0) / s
        var = (s1**2 / s**2) * (1.0 - (a / a1) ** 2)
        x = a1 * x0 + np.sqrt(max(s1**2 - var, 0.0)) * eps_hat + np.sqrt(var) * rng.standard_normal((B, D))
    return x


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 5.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        lr = self.lr if lr is None else lr
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not np.isfinite(norm):
                raise FloatingPointError("non-finite gradient")
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            mh = m / (1 - b1**self.step_count)
            vh = v / (1 - b2**self.step_count)
            out[k] = p - lr * mh / (np.sqrt(vh) + self.eps)
        return out


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def denoising_loss_and_grad(net: ChunkNet, x0, t, eps, cond, views, sched: DiffusionSchedule):
    """Mean squared x0-prediction error on diffused samples and its parameter gradient."""
    x_t = add_noise(x0, eps, t, sched)
    ctx = PaddedContext.from_views(views, net.config.token_dim)
    pred, tape = net.forward(x_t, t, cond, ctx, keep_tape=True)
    diff = pred - x0
    B = len(x0)
    loss = float(np.sum(diff**2) / B)
    grads = net.backward(tape, 2.0 * diff / B)
    return loss, grads, pred


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CFNET\x00\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: ChunkNet, path=None, extra: dict | None = None) -> bytes:
    """Binary layout: magic, u32 version, u32 meta length, meta JSON, u32 n_arrays,
    shape table (u16 name length, name, u8 ndim, u64 dims), then float64 LE data."""
    meta = {"role": net.role, "config": net.config.__dict__, "extra": extra or {}}
    meta_b = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_b)))
    buf.write(meta_b)
    names = sorted(net.params)
    buf.write(struct.pack("<I", len(names)))
    for n in names:
        a = net.params[n]
        nb = n.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack("<" + "Q" * a.ndim, *a.shape))
    for n in names:
        buf.write(np.ascontiguousarray(net.params[n], dtype="<f8").tobytes())
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(source) -> tuple[ChunkNet, dict]:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    try:
        return _decode_checkpoint(data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"corrupt checkpoint: {exc}") from None


def _decode_checkpoint(data: bytes):
    version, mlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off: off + mlen])
    off += mlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off: off + ln].decode()
        off += ln
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from("<" + "Q" * nd, data, off)
        off += 8 * nd
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        if off + 8 * size > len(data):
            raise struct.error("truncated array data")
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(data):
        raise struct.error("trailing bytes after array data")
    net = ChunkNet(NetConfig(**meta["config"]), params, meta["role"])
    return net, meta["extra"]


def checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
