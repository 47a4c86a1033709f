"""Exit criteria A1-A12.

Every test prints one ``A<n> PASS|FAIL`` line with the measured values. The
training-based criteria (A2, A3, A6, A7, A8) share session fixtures, so the
whole module takes roughly 15 minutes on one core.
"""

import copy
import shutil
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from context_forcing import cli, pipeline
from context_forcing.config import ExperimentConfig, dumps
from context_forcing.distill import dmd_gradient, kl_decomposition_check, make_batch
from context_forcing.erft import PerturbationConfig, continuation_error, fit_denoiser
from context_forcing.evaluation import effective_context_probe, window_consistency
from context_forcing.memory import CacheConfig, SlowFastCache, TokenEntry
from context_forcing.model import ChunkNet, generate_chunk
from context_forcing.numerics import GaussianDist, gaussian_marginal_score, make_schedule, substream
from context_forcing.pipeline import RunDir
from context_forcing.rollout import (CurriculumSchedule, RolloutPlan, inference_rollout, sample_random_exit,
                                     sample_rollout_length, self_rollout)

from test_model import random_batch
from test_rollout import PROC as SMALL_PROC, counting_net, steps_per_chunk

SCHED = make_schedule(4)
SEEDS = (0, 1, 2, 3, 4)

pytestmark = pytest.mark.slow


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def sign_test(diffs) -> float:
    diffs = np.asarray(diffs)
    return stats.binomtest(int(np.sum(diffs > 0)), len(diffs), 0.5, alternative="greater").pvalue


def cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- shared training runs -------------------------------------------------


def _clone(src: RunDir, path, cfg) -> RunDir:
    run = RunDir(path, cfg)
    run.prepare()
    shutil.copytree(src.path / "checkpoints", run.path / "checkpoints", dirs_exist_ok=True)
    return run


@pytest.fixture(scope="session")
def cdmd_runs(tmp_path_factory):
    """Per seed: stage 1 once, then stage 2 with the full-context and the memoryless teacher."""
    root = tmp_path_factory.mktemp("cdmd")
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        cfg = ExperimentConfig.default().with_overrides([f"run.seed={seed}"])
        long = RunDir(root / f"s{seed}-long", cfg)
        long.prepare()
        pipeline.stage1(long)
        blind = _clone(long, root / f"s{seed}-memoryless", cfg.with_overrides(["teacher.memoryless=true"]))
        short = _clone(long, root / f"s{seed}-stage1", cfg.with_overrides(["stage2.enabled=false"]))
        pipeline.stage2(long)
        pipeline.stage2(blind)
        out[seed] = {name: (run, pipeline.evaluate(run, name))
                     for name, run in (("long", long), ("memoryless", blind), ("stage1", short))}
    out["elapsed"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def teacher_runs(tmp_path_factory):
    """Per seed: pretrained teacher, its error-recycling fine-tune and an equal-step clean fine-tune."""
    root = tmp_path_factory.mktemp("teachers")
    out = {}
    for seed in SEEDS:
        cfg = ExperimentConfig.default().with_overrides([f"run.seed={seed}", "teacher.kind=trained"])
        run = RunDir(root / f"s{seed}", cfg)
        run.prepare()
        pretrained = pipeline.teacher_pretrain(run)
        bank = pipeline.load_error_bank(run)
        erft = pipeline.teacher_erft(run)
        proc, sched = pipeline.build_domain(cfg)
        clean, _, _ = fit_denoiser(pretrained, proc, sched, cfg.cache_config(), cfg["erft.steps"],
                                   cfg["teacher.n_chunks"], batch=cfg["teacher.batch"], lr=cfg["erft.lr"],
                                   seed=seed, tag="teacher-erft", bank=copy.deepcopy(bank), lr_decay=False)
        out[seed] = {"cfg": cfg, "bank": bank, "erft": erft, "clean": clean}
    return out


# -- A1 -------------------------------------------------------------------


def _score(dist):
    def f(x_t, t, query):
        out = np.empty_like(x_t)
        for j in np.unique(t):
            sel = t == j
            out[sel] = gaussian_marginal_score(x_t[sel], int(j), dist, SCHED)
        return out
    return f


def _kl(m0, S0, m1, S1):
    d = len(m0)
    S1i = np.linalg.inv(S1)
    diff = m1 - m0
    return 0.5 * (np.trace(S1i @ S0) + diff @ S1i @ diff - d + np.log(np.linalg.det(S1) / np.linalg.det(S0)))


def _diffused_objective(mean, cov, target: GaussianDist):
    """Level-averaged ``w_t``-weighted KL between the diffused model and the diffused target."""
    total = 0.0
    eye = np.eye(len(mean))
    for j in range(1, SCHED.T + 1):
        a, s = float(SCHED.alpha_at(j)), float(SCHED.sigma_at(j))
        total += float(SCHED.weight_at(j)) * _kl(a * mean, a * a * cov + s * s * eye,
                                                 a * target.mean, a * a * target.cov + s * s * eye)
    return total / SCHED.T


def _fd(f, theta, h=1e-5):
    return np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(len(theta))])


def test_a1_dmd_gradient_oracle(capsys):
    t0 = time.perf_counter()
    rng = substream(0, "A1")
    cosines = {"1d location-scale": [], "2d affine": []}
    for _ in range(20):
        # x = m + s z against N(mu, tau^2)
        mu, tau = rng.uniform(-1, 1), rng.uniform(0.5, 2.0)
        target = GaussianDist(np.array([mu]), np.array([[tau * tau]]))
        theta = np.array([rng.uniform(-3, 3), rng.uniform(0.3, 3.0)])
        z = rng.standard_normal((4096, 1))
        batch = make_batch(theta[0] + theta[1] * z, lambda g, z=z: np.array([g.sum(), np.sum(g * z)]), SCHED, rng)
        model = GaussianDist(theta[:1], np.array([[theta[1] ** 2]]))
        g = dmd_gradient(_score(model), _score(target), batch, SCHED)
        fd = _fd(lambda th: _diffused_objective(th[:1], np.array([[th[1] ** 2]]), target), theta)
        cosines["1d location-scale"].append(cosine(g, fd))

        # x = m + A z against a full-covariance Gaussian
        Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        target = GaussianDist(rng.uniform(-1, 1, 2), Q @ np.diag(rng.uniform(0.5, 2.0, 2)) @ Q.T)
        m, A = rng.uniform(-3, 3, 2), np.eye(2) + 0.4 * rng.standard_normal((2, 2))
        theta = np.concatenate([m, A.ravel()])
        z = rng.standard_normal((4096, 2))

        def vjp(g, z=z):
            return np.concatenate([g.sum(axis=0), (g.T @ z).ravel()])

        batch = make_batch(m + z @ A.T, vjp, SCHED, rng)
        g = dmd_gradient(_score(GaussianDist(m, A @ A.T)), _score(target), batch, SCHED)
        fd = _fd(lambda th: _diffused_objective(th[:2], th[2:].reshape(2, 2) @ th[2:].reshape(2, 2).T, target),
                 theta)
        cosines["2d affine"].append(cosine(g, fd))
    elapsed = time.perf_counter() - t0
    worst = {k: min(v) for k, v in cosines.items()}
    ok = all(v > 0.95 for v in worst.values()) and elapsed < 120
    verdict(capsys, "A1", ok, f"min cosine {', '.join(f'{k} {v:.4f}' for k, v in worst.items())} "
                              f"over 20 points each, N=4096, {elapsed:.1f}s")


# -- A2 -------------------------------------------------------------------


def test_a2_teacher_reliability(capsys, cdmd_runs, teacher_runs):
    """Teacher continuations from student-made contexts keep the consistency they have from real contexts."""
    cfg = teacher_runs[0]["cfg"]
    proc, sched = pipeline.build_domain(cfg)
    cache = cfg.cache_config()
    teacher = teacher_runs[0]["erft"]
    run, _ = cdmd_runs[0]["stage1"]
    student = run.load("stage1-gen", "A2", "stage1")
    n_ctx, n_new, n = cfg["curriculum.L0"], 10, 256
    rng = substream(0, "A2")
    u, cond = proc.sample_identity(n, rng)
    contexts = {"ground truth": proc.rollout_frames(u, n_ctx * proc.chunk_size, rng).reshape(n, n_ctx, -1),
                "stage-1": inference_rollout(student, sched, cache, cond, n_ctx, proc.frame_dim, 0, ("A2-ctx",))[0]}
    scores = {}
    for name, ctx in contexts.items():
        X, _ = inference_rollout(teacher, sched, cache, cond, n_ctx + n_new, proc.frame_dim, 0, ("A2-cont",),
                                 overrides={i: ctx[:, i] for i in range(n_ctx)})
        frames = X[:, n_ctx:].reshape(n, n_new, proc.chunk_size, proc.frame_dim)
        scores[name] = float(np.mean([window_consistency(f, n_new - 1, 0, f[0, 0]) for f in frames]))
    rel = abs(scores["stage-1"] - scores["ground truth"]) / scores["ground truth"]
    verdict(capsys, "A2", rel <= 0.05, f"consistency at continuation mark {n_new}: ground-truth contexts "
                                       f"{scores['ground truth']:.4f}, stage-1 contexts {scores['stage-1']:.4f}, "
                                       f"relative gap {rel:.2%} (limit 5%)")


# -- A3 -------------------------------------------------------------------


def test_a3_contextual_distillation_beats_baselines(capsys, cdmd_runs):
    at60 = {name: np.array([cdmd_runs[s][name][1]["mean"][-1] for s in SEEDS])
            for name in ("long", "memoryless", "stage1")}
    assert all(cdmd_runs[s]["long"][1]["marks"][-1] == 60 for s in SEEDS)
    d_short = at60["long"] - at60["stage1"]
    d_blind = at60["long"] - at60["memoryless"]
    p_short, p_blind = sign_test(d_short), sign_test(d_blind)
    elapsed = cdmd_runs["elapsed"]
    ok = (p_short < 0.05 and p_blind < 0.05 and at60["long"].mean() > max(at60["stage1"].mean(),
                                                                          at60["memoryless"].mean())
          and elapsed < 1800)
    verdict(capsys, "A3", ok,
            f"consistency@60 long {np.round(at60['long'], 3)} stage1 {np.round(at60['stage1'], 3)} "
            f"memoryless {np.round(at60['memoryless'], 3)}; sign test p {p_short:.4f} / {p_blind:.4f}; "
            f"{elapsed / 60:.1f} min")


# -- A4 -------------------------------------------------------------------


def test_a4_kl_chain_rule(capsys):
    rng = substream(0, "A4")
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n))
        dists = []
        for _ in range(2):
            Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            dists.append(GaussianDist(rng.standard_normal(n), Q @ np.diag(rng.uniform(0.3, 3.0, n)) @ Q.T))
        glob, local, cond = kl_decomposition_check(*dists, k)
        worst = max(worst, abs(glob.value - (local.value + cond.value)))
    verdict(capsys, "A4", worst <= 1e-9, f"max |global - (local + conditional)| = {worst:.2e} over 100 instances")


# -- A5 -------------------------------------------------------------------


def test_a5_cache_fuzz(capsys):
    rng = substream(0, "A5")
    cfg = CacheConfig(3, 12, 6)
    cache = SlowFastCache(cfg)
    birth, violations = 0, []
    while birth < 100_000:
        size = int(rng.integers(1, 4))
        keys = rng.standard_normal((size, 4))
        if rng.random() < 0.02:
            keys[:] = 0.0
        elif rng.random() < 0.3:
            keys = keys * 0.01 + rng.standard_normal(4)
        cache.append_chunk([TokenEntry(k, k, k, birth + j) for j, k in enumerate(keys)])
        birth += size
        try:
            cache.check_invariants()
        except AssertionError as exc:
            violations.append((birth, str(exc)))
        pos = cache.positions()
        births = [e.birth_index for e in cache.ordered()]
        c = cache.counters
        if not (np.all(np.diff(pos) > 0) and np.all(np.diff(births) > 0) and pos.max() <= cfg.capacity - 1
                and c["appended"] == birth == len(cache) + c["discarded"] + c["evicted"]):
            violations.append((birth, "ordering, bound or conservation"))
    verdict(capsys, "A5", not violations, f"{birth} appends, {len(violations)} violations, "
                                          f"counters {cache.counters}")


# -- A6 -------------------------------------------------------------------


def test_a6_bounded_positions(capsys, cdmd_runs, tmp_path):
    cache = SlowFastCache(CacheConfig(3, 12, 6))
    rng = substream(0, "A6")
    for c in range(10_000):
        keys = rng.standard_normal((3, 4))
        cache.append_chunk([TokenEntry(k, k, k, 3 * c + j) for j, k in enumerate(keys)])
    max_pos = int(cache.positions().max())
    run, default = cdmd_runs[0]["long"]
    ablation = _clone(run, tmp_path / "no-bounded-pe", run.cfg.with_overrides(["eval.bounded_positions=false"]))
    unbounded = pipeline.evaluate(ablation, "no-bounded-pe")
    ok = max_pos == 20 and unbounded["mean"][-1] < default["mean"][-1]
    verdict(capsys, "A6", ok, f"max position after 10^4 chunks {max_pos}; consistency@60 default "
                              f"{default['mean'][-1]:.4f}, without bounded positions {unbounded['mean'][-1]:.4f}")


# -- A7 -------------------------------------------------------------------


def test_a7_surprisal_beats_uniform(capsys, cdmd_runs):
    run, _ = cdmd_runs[0]["long"]
    cfg = run.cfg
    proc, sched = pipeline.build_domain(cfg)
    gen = run.load("stage2-gen", "A7", "stage2")
    base = cfg.cache_config()
    horizon = (base.n_fast + base.n_sink) // proc.chunk_size
    delays = np.arange(horizon + 1, 41)
    event = np.tile(proc.mixing @ np.array([3.0, -3.0]), proc.chunk_size)
    policies = {"surprisal": base,
                "uniform-1": replace(base, selection="uniform", consolidation_interval=1),
                "uniform-2": replace(base, selection="uniform", consolidation_interval=2)}
    recall = {name: effective_context_probe(gen, proc, sched, cc, event, delays, event_at=3,
                                            seeds=tuple(range(20))).recall.mean(axis=1)
              for name, cc in policies.items()}
    p = {name: sign_test(recall["surprisal"] - recall[name]) for name in ("uniform-1", "uniform-2")}
    ok = all(v < 0.05 for v in p.values())
    verdict(capsys, "A7", ok, f"mean recall at delays {delays[0]}..{delays[-1]}: "
                              + ", ".join(f"{k} {v.mean():.4f}" for k, v in recall.items())
                              + f"; paired sign test p vs uniform-1 {p['uniform-1']:.4f}, "
                                f"vs uniform-2 {p['uniform-2']:.4f}")


# -- A8 -------------------------------------------------------------------


def test_a8_error_recycling(capsys, teacher_runs):
    pert_erft, pert_clean, clean_erft, clean_clean = [], [], [], []
    for seed in SEEDS:
        r = teacher_runs[seed]
        cfg = r["cfg"]
        proc, sched = pipeline.build_domain(cfg)
        pert = PerturbationConfig(cfg["erft.bernoulli_p"], cfg["erft.scale"])
        args = (proc, sched, cfg.cache_config(), cfg["teacher.n_chunks"], 2048, 1000 + seed)
        pert_erft.append(continuation_error(r["erft"], *args, r["bank"], pert))
        pert_clean.append(continuation_error(r["clean"], *args, r["bank"], pert))
        clean_erft.append(continuation_error(r["erft"], *args))
        clean_clean.append(continuation_error(r["clean"], *args))
    pert_erft, pert_clean = np.array(pert_erft), np.array(pert_clean)
    ratio = np.array(clean_erft) / np.array(clean_clean)
    ok = bool(np.all(pert_erft < pert_clean) and np.all(ratio <= 1.2))
    verdict(capsys, "A8", ok, f"perturbed-context error ERFT {np.round(pert_erft, 4)} vs clean fine-tune "
                              f"{np.round(pert_clean, 4)}; clean-context loss ratio {np.round(ratio, 3)} (limit 1.2)")


# -- A9 -------------------------------------------------------------------


def test_a9_curriculum(capsys):
    L0, L1, s_d = 5, 30, 500
    cur = CurriculumSchedule(L0, L1, s_d)
    rng = substream(0, "A9")
    bad = 0
    for s in range(0, 2 * s_d + 1):
        upper = min(L1, L0 + int((L1 - L0) * min(s, s_d) / s_d))
        draws = [sample_rollout_length(cur, rng, s) for _ in range(20)]
        bad += sum(not L0 <= L <= upper for L in draws)
    draws = np.array([sample_rollout_length(cur, rng, s_d + int(rng.integers(0, 1000))) for _ in range(100_000)])
    counts = np.bincount(draws - L0, minlength=L1 - L0 + 1)
    ok_range = draws.min() >= L0 and draws.max() <= L1
    p = stats.chisquare(counts).pvalue
    verdict(capsys, "A9", bad == 0 and ok_range and p > 0.01,
            f"{bad} out-of-bound lengths for s in 0..{2 * s_d}; chi-square p = {p:.3f} over 10^5 draws")


# -- A10 ------------------------------------------------------------------


def test_a10_clean_context_policy(capsys):
    rng = substream(0, "A10")
    wrong = 0
    for trial in range(100):
        L = int(rng.integers(2, 15))
        l = int(rng.integers(1, L + 1))
        c_len = int(rng.integers(0, L - l + 1))
        r = sample_random_exit(SCHED.T, rng)
        _, cond = SMALL_PROC.sample_identity(2, substream(trial, "A10-cond"))
        gen = counting_net(trial)
        res = self_rollout(gen, RolloutPlan(L, r, l, c_len, cond), SCHED, CacheConfig(1, 2, 1),
                           SMALL_PROC.frame_dim, trial)
        runs = steps_per_chunk(gen.calls, SCHED.T)
        expected = [SCHED.T if L - c_len - l <= i < L - l else r for i in range(L)]
        wrong += runs != expected or res.step_log != expected
    verdict(capsys, "A10", wrong == 0, f"{wrong} of 100 rollouts deviate from the clean-context step policy")


# -- A11 ------------------------------------------------------------------


def test_a11_determinism(capsys, tmp_path):
    tiny = ExperimentConfig.default().with_overrides([
        "teacher.kind=trained", "teacher.steps=4", "teacher.n_chunks=3", "teacher.batch=2", "erft.steps=3",
        "base.steps=4", "base.n_chunks=2", "base.batch=2", "stage1.steps=3", "stage1.batch=2", "stage2.steps=4",
        "stage2.batch=2", "curriculum.L0=2", "curriculum.L1=5", "curriculum.s_d=2", "rollout.target_len=1",
        "eval.n_chunks=8", "eval.marks=4,8", "eval.seeds=0,1", "eval.n_prompts=3"])
    path = tmp_path / "tiny.cfg"
    path.write_text(dumps(tiny))
    commands = [["teacher-pretrain"], ["teacher-erft"], ["stage1"], ["stage2"], ["eval"], ["ablate", "uniform-1"],
                ["report"]]
    for d in ("a", "b"):
        for cmd in commands:
            out = tmp_path / d if cmd[0] in ("ablate", "report") else tmp_path / d / "default"
            assert cli.main([*cmd, "--config", str(path), "--seed", "11", "--out", str(out)]) == 0, cmd
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    streams = [f for f in files if f.suffix == ".jsonl"]
    verdict(capsys, "A11", not differ and len(streams) >= 10,
            f"{len(streams)} metric streams and {len(files) - len(streams)} other files compared, "
            f"{len(differ)} differ {differ}")


# -- A12 ------------------------------------------------------------------


def test_a12_hand_derived_gradients(capsys):
    cfg = ExperimentConfig.default()
    proc, _ = pipeline.build_domain(cfg)
    net_cfg = pipeline.net_config(cfg, proc)
    worst = {}
    h = 1e-6
    for point in range(20):
        rng = substream(point, "A12")
        net = ChunkNet.init(net_cfg, rng, scale=1.0)
        net = net.with_params({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in net.params.items()})
        batch = random_batch(rng, B=6, n_max=21, cfg=net_cfg)
        G = rng.standard_normal((len(batch[0]), net_cfg.chunk_dim))
        _, tape = generate_chunk(net, *batch, keep_tape=True)
        grads = net.backward(tape, G)
        for name, p in net.params.items():
            v = rng.standard_normal(p.shape)
            f = [float(np.sum(G * generate_chunk(net.with_params({**net.params, name: p + s * h * v}), *batch)))
                 for s in (1, -1)]
            fd = (f[0] - f[1]) / (2 * h)
            an = float(np.sum(grads[name] * v))
            worst[name] = max(worst.get(name, 0.0), abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    top = max(worst, key=worst.get)
    verdict(capsys, "A12", max(worst.values()) <= 1e-4,
            f"{len(worst)} parameter groups x 20 points, worst relative error {worst[top]:.2e} ({top})")
