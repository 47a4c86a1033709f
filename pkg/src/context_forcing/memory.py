"""Slow-fast KV cache: attention sink, surprisal-consolidated slow memory, FIFO fast memory."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class CacheInvariantError(AssertionError):
    pass


class Segment(str, enum.Enum):
    SINK = "sink"
    SLOW = "slow"
    FAST = "fast"


class Decision(str, enum.Enum):
    CONSOLIDATE = "consolidate"
    DISCARD = "discard"


@dataclass(frozen=True)
class CacheConfig:
    n_sink: int = 3
    n_slow: int = 12
    n_fast: int = 6
    tau: float = 0.95
    consolidation_interval: int = 2
    keep_policy: str = "first"
    selection: str = "surprisal"
    bounded_positions: bool = True

    def __post_init__(self):
        if min(self.n_sink, self.n_slow, self.n_fast) < 0:
            raise ValueError("cache capacities must be >= 0")
        if self.n_sink + self.n_slow + self.n_fast < 1:
            raise ValueError("cache must hold at least one entry")
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")
        if self.consolidation_interval < 1:
            raise ValueError("consolidation_interval must be >= 1")
        if self.keep_policy not in ("first", "all"):
            raise ValueError(f"unknown keep_policy {self.keep_policy!r}")
        if self.selection not in ("surprisal", "uniform"):
            raise ValueError(f"unknown selection {self.selection!r}")

    @property
    def capacity(self) -> int:
        return self.n_sink + self.n_slow + self.n_fast


@dataclass
class TokenEntry:
    key: np.ndarray
    value: np.ndarray
    payload: np.ndarray
    birth_index: int
    chunk_index: int = -1
    segment: Segment | None = None


@dataclass
class AppendReport:
    segment: Segment
    decision: Decision | None = None
    promoted: int | None = None
    discarded: int | None = None
    evicted: int | None = None


@dataclass(frozen=True)
class ContextView:
    """Immutable snapshot of the cache read path.

    ``births`` is carried for oracles and diagnostics only; learned networks
    read ``payloads`` and ``positions``.
    """

    payloads: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    births: np.ndarray
    segments: tuple = ()

    def __len__(self) -> int:
        return len(self.positions)

    def entries(self):
        return list(zip(self.payloads, self.keys, self.values, self.positions))

    def restrict(self, segments) -> "ContextView":
        keep = np.array([s in segments for s in self.segments], dtype=bool)
        if keep.size == 0:
            return self
        return ContextView(self.payloads[keep], self.keys[keep], self.values[keep],
                           self.positions[keep], self.births[keep],
                           tuple(s for s, k in zip(self.segments, keep) if k))


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def consolidation_decision(k_t, k_prev, tau: float) -> Decision:
    """Consolidate iff cosine(k_t, k_prev) < tau; no predecessor means consolidate."""
    if k_prev is None:
        return Decision.CONSOLIDATE
    k_t = np.asarray(k_t, dtype=float)
    k_prev = np.asarray(k_prev, dtype=float)
    if k_t.shape != k_prev.shape:
        raise ValueError("key dimensions differ")
    return Decision.CONSOLIDATE if cosine(k_t, k_prev) < tau else Decision.DISCARD


class SlowFastCache:
    """Three-segment context cache with bounded positional indexing.

    Consolidation decisions are taken when a token enters fast memory and
    applied when it leaves, so a token never occupies two segments.
    """

    def __init__(self, config: CacheConfig | None = None):
        self.config = config or CacheConfig()
        self.sink: list[TokenEntry] = []
        self.slow: deque[TokenEntry] = deque()
        self.fast: deque[TokenEntry] = deque()
        self.pending_flags: deque[Decision] = deque()
        self.last_key: np.ndarray | None = None
        self.counters = dict(appended=0, consolidated=0, evicted=0, discarded=0,
                             decisions_consolidate=0, decisions_discard=0, zero_norm_keys=0)
        self._last_birth = -1
        self._fast_chunks = 0

    # -- write path ----------------------------------------------------------

    def append(self, entry: TokenEntry, decision: Decision | None = None) -> AppendReport:
        if entry.birth_index <= self._last_birth:
            raise ValueError(f"birth_index {entry.birth_index} is not greater than {self._last_birth}")
        self._last_birth = entry.birth_index
        self.counters["appended"] += 1
        cfg = self.config
        if len(self.sink) < cfg.n_sink:
            entry.segment = Segment.SINK
            self.sink.append(entry)
            return AppendReport(Segment.SINK)

        if decision is None:
            decision = self._decide(entry.key)
            self.last_key = np.asarray(entry.key, dtype=float)
        self.counters["decisions_" + decision.name.lower()] += 1
        report = AppendReport(Segment.FAST, decision=decision)
        if cfg.n_fast == 0:
            self._retire(entry, decision, report)
            return report
        entry.segment = Segment.FAST
        self.fast.append(entry)
        self.pending_flags.append(decision)
        if len(self.fast) > cfg.n_fast:
            self._retire(self.fast.popleft(), self.pending_flags.popleft(), report)
        return report

    def append_chunk(self, entries: list[TokenEntry]) -> list[AppendReport]:
        """Append one chunk's tokens with a single chunk-level decision.

        The chunk key is the mean of its token keys. Decisions are evaluated on
        every ``consolidation_interval``-th post-sink chunk; ``keep_policy``
        selects which tokens of a consolidated chunk are flagged.
        """
        cfg = self.config
        reports = []
        to_fast = []
        for e in entries:
            if len(self.sink) < cfg.n_sink:
                reports.append(self.append(e))
            else:
                to_fast.append(e)
        if not to_fast:
            return reports
        chunk_key = np.mean([np.asarray(e.key, dtype=float) for e in to_fast], axis=0)
        on_interval = self._fast_chunks % cfg.consolidation_interval == 0
        self._fast_chunks += 1
        if not on_interval:
            chunk_decision = Decision.DISCARD
        elif cfg.selection == "uniform":
            chunk_decision = Decision.CONSOLIDATE
        else:
            chunk_decision = self._decide(chunk_key)
        self.last_key = chunk_key
        for i, e in enumerate(to_fast):
            keep = cfg.keep_policy == "all" or i == 0
            d = chunk_decision if keep else Decision.DISCARD
            reports.append(self.append(e, decision=d))
        return reports

    def _decide(self, key) -> Decision:
        key = np.asarray(key, dtype=float)
        if self.last_key is not None and (np.linalg.norm(key) == 0 or np.linalg.norm(self.last_key) == 0):
            self.counters["zero_norm_keys"] += 1
        if self.config.selection == "uniform":
            return Decision.CONSOLIDATE
        return consolidation_decision(key, self.last_key, self.config.tau)

    def _retire(self, entry: TokenEntry, decision: Decision, report: AppendReport):
        cfg = self.config
        if decision is Decision.CONSOLIDATE and cfg.n_slow > 0:
            entry.segment = Segment.SLOW
            self.slow.append(entry)
            self.counters["consolidated"] += 1
            report.promoted = entry.birth_index
            if len(self.slow) > cfg.n_slow:
                old = self.slow.popleft()
                old.segment = None
                self.counters["evicted"] += 1
                report.evicted = old.birth_index
        else:
            entry.segment = None
            self.counters["discarded"] += 1
            report.discarded = entry.birth_index

    # -- read path -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.sink) + len(self.slow) + len(self.fast)

    def ordered(self):
        yield from self.sink
        yield from self.slow
        yield from self.fast

    def position_of(self, entry: TokenEntry) -> int:
        cfg = self.config
        for segment, offset in ((self.sink, 0), (self.slow, cfg.n_sink),
                                (self.fast, cfg.n_sink + cfg.n_slow)):
            for i, e in enumerate(segment):
                if e is entry:
                    return offset + i if cfg.bounded_positions else e.birth_index
        raise KeyError(f"entry with birth_index {entry.birth_index} is not in the cache")

    def positions(self) -> np.ndarray:
        cfg = self.config
        if not cfg.bounded_positions:
            return np.array([e.birth_index for e in self.ordered()], dtype=int)
        return np.concatenate([
            np.arange(len(self.sink)),
            cfg.n_sink + np.arange(len(self.slow)),
            cfg.n_sink + cfg.n_slow + np.arange(len(self.fast)),
        ]).astype(int)

    def context_view(self) -> ContextView:
        entries = list(self.ordered())
        if not entries:
            empty = np.zeros((0, 0))
            return ContextView(empty, empty, empty, np.zeros(0, dtype=int), np.zeros(0, dtype=int))
        return ContextView(
            payloads=np.stack([e.payload for e in entries]),
            keys=np.stack([e.key for e in entries]),
            values=np.stack([e.value for e in entries]),
            positions=self.positions(),
            births=np.array([e.birth_index for e in entries], dtype=int),
            segments=tuple(e.segment.value for e in entries),
        )

    def check_invariants(self):
        """Raise :class:`CacheInvariantError` on any capacity, ordering, conservation or bound violation."""
        cfg = self.config
        for name, seg, cap in (("sink", self.sink, cfg.n_sink), ("slow", self.slow, cfg.n_slow),
                               ("fast", self.fast, cfg.n_fast)):
            if len(seg) > cap:
                raise CacheInvariantError(f"{name} holds {len(seg)} > {cap} entries")
            b = [e.birth_index for e in seg]
            if any(x >= y for x, y in zip(b, b[1:])):
                raise CacheInvariantError(f"{name} is not ordered by birth index")
        if len(self.pending_flags) != len(self.fast):
            raise CacheInvariantError("one pending decision per fast entry expected")
        if self.slow and self.fast and self.slow[-1].birth_index >= self.fast[0].birth_index:
            raise CacheInvariantError("a slow entry is newer than a fast entry")
        c = self.counters
        if c["appended"] != len(self) + c["discarded"] + c["evicted"]:
            raise CacheInvariantError("appended != held + discarded + evicted")
        if cfg.bounded_positions and len(self) and self.positions().max() > cfg.capacity - 1:
            raise CacheInvariantError("position index outside the bounded range")

    # -- text serialization --------------------------------------------------

    FORMAT = "slowfast-cache"
    VERSION = 1

    def to_text(self) -> str:
        cfg = self.config
        lines = [f"{self.FORMAT} v{self.VERSION}",
                 "config n_sink={} n_slow={} n_fast={} tau={!r} interval={} keep={} selection={} bounded={}".format(
                     cfg.n_sink, cfg.n_slow, cfg.n_fast, cfg.tau, cfg.consolidation_interval,
                     cfg.keep_policy, cfg.selection, int(cfg.bounded_positions))]
        flags = [None] * len(self.sink) + [None] * len(self.slow) + list(self.pending_flags)
        for e, pos, flag in zip(self.ordered(), self.positions(), flags):
            lines.append("entry segment={} birth={} chunk={} position={} flag={} key={} value={} payload={}".format(
                e.segment.value, e.birth_index, e.chunk_index, int(pos),
                flag.value if flag else "-", _fmt(e.key), _fmt(e.value), _fmt(e.payload)))
        lines.append("state last_key={} last_birth={} fast_chunks={} counters={}".format(
            _fmt(self.last_key) if self.last_key is not None else "-", self._last_birth, self._fast_chunks,
            ",".join(f"{k}:{v}" for k, v in self.counters.items())))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SlowFastCache":
        lines = text.strip().splitlines()
        if lines[0] != f"{cls.FORMAT} v{cls.VERSION}":
            raise ValueError(f"unsupported cache format header {lines[0]!r}")
        kv = dict(tok.split("=", 1) for tok in lines[1].split()[1:])
        cfg = CacheConfig(int(kv["n_sink"]), int(kv["n_slow"]), int(kv["n_fast"]), float(kv["tau"]),
                          int(kv["interval"]), kv["keep"], kv["selection"], bool(int(kv["bounded"])))
        cache = cls(cfg)
        for line in lines[2:]:
            tag, *rest = line.split()
            fields = dict(tok.split("=", 1) for tok in rest)
            if tag == "entry":
                seg = Segment(fields["segment"])
                e = TokenEntry(_parse(fields["key"]), _parse(fields["value"]), _parse(fields["payload"]),
                               int(fields["birth"]), int(fields["chunk"]), seg)
                {Segment.SINK: cache.sink, Segment.SLOW: cache.slow, Segment.FAST: cache.fast}[seg].append(e)
                if seg is Segment.FAST:
                    cache.pending_flags.append(Decision(fields["flag"]))
            elif tag == "state":
                cache.last_key = None if fields["last_key"] == "-" else _parse(fields["last_key"])
                cache._last_birth = int(fields["last_birth"])
                cache._fast_chunks = int(fields["fast_chunks"])
                cache.counters = {k: int(v) for k, v in (p.split(":") for p in fields["counters"].split(","))}
        return cache


def _fmt(a) -> str:
    return "[" + ",".join(repr(float(x)) for x in np.asarray(a).ravel()) + "]"


def _parse(s: str) -> np.ndarray:
    body = s.strip()[1:-1]
    return np.array([float(x) for x in body.split(",")] if body else [], dtype=float)
