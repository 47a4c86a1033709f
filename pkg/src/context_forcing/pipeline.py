"""Run-directory pipelines behind the command line.

A run directory holds::

    config.txt               resolved config of the last command
    seed.txt
    metrics/<command>.jsonl  one JSON record per training step or evaluation
    checkpoints/*.ckpt       binary network checkpoints
    checkpoints/error-bank.npy
    curves/consistency-<config hash>-s<seed>.csv
    summary.json

Every command is a pure function of the config, the seed and the checkpoints
already present, so rerunning with the same inputs rewrites identical files.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .erft import ErrorBank, PerturbationConfig, continuation_error, fit_denoiser
from .evaluation import consistency_curve, data_consistency_curve, semantic_alignment
from .model import ChunkNet, NetConfig, load_checkpoint, save_checkpoint
from .numerics import SceneProcess, make_schedule, substream
from .rollout import StageConfig, inference_rollout, make_teacher, train_stage1, train_stage2

CHECKPOINTS = {
    "teacher-pretrain": "teacher-pretrain.ckpt",
    "teacher": "teacher.ckpt",
    "base": "base.ckpt",
    "stage1-gen": "stage1-gen.ckpt",
    "stage1-fake": "stage1-fake.ckpt",
    "stage2-gen": "stage2-gen.ckpt",
}


class MissingPrerequisite(RuntimeError):
    """A command needs an artifact that an earlier command produces."""


class CheckpointMismatch(RuntimeError):
    """A checkpoint was written under an incompatible model configuration."""


class InconsistentRuns(RuntimeError):
    """Run directories that cannot share one report table."""


def build_domain(cfg: cfgmod.ExperimentConfig):
    d = cfg.section("domain")
    proc = SceneProcess(identity_dim=d["identity_dim"], frame_dim=d["frame_dim"], transition=d["transition"],
                        noise_scale=d["noise_scale"], chunk_size=d["chunk_size"], cond_noise=d["cond_noise"])
    s = cfg.section("schedule")
    sched = make_schedule(s["T"], kind=s["kind"], t_max=s["t_max"], weighting=s["weighting"])
    return proc, sched


def net_config(cfg: cfgmod.ExperimentConfig, proc: SceneProcess) -> NetConfig:
    n = cfg.section("net")
    return NetConfig(chunk_dim=proc.chunk_dim, token_dim=proc.frame_dim, cond_dim=proc.cond_dim,
                     T=cfg["schedule.T"], head_dim=n["head_dim"], n_heads=n["n_heads"], hidden=n["hidden"],
                     pe_base=n["pe_base"])


def model_fingerprint(cfg: cfgmod.ExperimentConfig) -> str:
    """Hash of the settings a checkpoint's meaning depends on."""
    import hashlib

    keys = [k for k in cfgmod.KEYS if k.split(".")[0] in ("domain", "schedule", "net")]
    text = "\n".join(f"{k}={cfg[k]!r}" for k in keys)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class RunDir:
    def __init__(self, path, cfg: cfgmod.ExperimentConfig):
        self.path = Path(path)
        self.cfg = cfg

    def ckpt(self, name: str) -> Path:
        return self.path / "checkpoints" / CHECKPOINTS[name]

    def has(self, name: str) -> bool:
        return self.ckpt(name).exists()

    def prepare(self):
        for sub in ("metrics", "checkpoints", "curves"):
            (self.path / sub).mkdir(parents=True, exist_ok=True)

    def record_config(self):
        """Snapshot the resolved config and seed; called once a command has succeeded."""
        _write_atomic(self.path / "config.txt", cfgmod.dumps(self.cfg))
        _write_atomic(self.path / "seed.txt", f"{self.cfg['run.seed']}\n")

    def save(self, name: str, net: ChunkNet, **extra):
        data = save_checkpoint(net, extra={"fingerprint": model_fingerprint(self.cfg), **extra})
        _write_atomic(self.ckpt(name), data, binary=True)

    def load(self, name: str, needed_by: str, produced_by: str) -> ChunkNet:
        path = self.ckpt(name)
        if not path.exists():
            raise MissingPrerequisite(f"{needed_by} needs checkpoint {path.name} in {self.path}; "
                                      f"run `{produced_by}` first")
        net, extra = load_checkpoint(path)
        want = model_fingerprint(self.cfg)
        if extra.get("fingerprint") != want:
            raise CheckpointMismatch(f"{path.name} was written with different domain/schedule/net settings "
                                     f"(fingerprint {extra.get('fingerprint')} != {want}); "
                                     f"use a fresh --out directory or restore the original config")
        return net

    def write_metrics(self, command: str, records):
        lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        _write_atomic(self.path / "metrics" / f"{command}.jsonl", lines)


def _write_atomic(path: Path, content, binary: bool = False):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb" if binary else "w", encoding=None if binary else "utf-8") as fh:
        fh.write(content)
    os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _records(metrics):
    return [{k: _jsonable(v) for k, v in m.items()} for m in metrics]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def teacher_pretrain(run: RunDir):
    cfg = run.cfg
    proc, sched = build_domain(cfg)
    t = cfg.section("teacher")
    seed = cfg["run.seed"]
    net = ChunkNet.init(net_config(cfg, proc), substream(seed, "teacher-init"), role="teacher",
                        scale=cfg["net.init_scale"])
    bank = ErrorBank(cfg["erft.bank_capacity"])
    net, losses, bank = fit_denoiser(net, proc, sched, cfg.cache_config(), t["steps"], t["n_chunks"],
                                     batch=t["batch"], lr=t["lr"], seed=seed, tag="teacher-pretrain", bank=bank)
    run.save("teacher-pretrain", net)
    _save_bank(run, bank)
    run.write_metrics("teacher-pretrain", [{"command": "teacher-pretrain", "step": i, "loss": float(v)}
                                           for i, v in enumerate(losses)])
    return net


def _save_bank(run: RunDir, bank: ErrorBank):
    arr = np.array(bank.residuals) if len(bank) else np.zeros((0, 0))
    buf = io.BytesIO()
    np.save(buf, arr)
    np.save(buf, np.array([bank.capacity, bank.insertions]))
    _write_atomic(run.path / "checkpoints" / "error-bank.npy", buf.getvalue(), binary=True)


def load_error_bank(run: RunDir) -> ErrorBank:
    path = run.path / "checkpoints" / "error-bank.npy"
    if not path.exists():
        raise MissingPrerequisite(f"teacher-erft needs {path.name}; run `teacher-pretrain` first")
    with open(path, "rb") as fh:
        res = np.load(fh)
        cap, ins = np.load(fh)
    return ErrorBank.from_state({"capacity": cap, "insertions": ins, "residuals": list(res)})


def teacher_erft(run: RunDir):
    cfg = run.cfg
    proc, sched = build_domain(cfg)
    net = run.load("teacher-pretrain", "teacher-erft", "teacher-pretrain")
    e = cfg.section("erft")
    t = cfg.section("teacher")
    seed = cfg["run.seed"]
    records = []
    if e["enabled"]:
        bank = load_error_bank(run)
        pert = PerturbationConfig(e["bernoulli_p"], e["scale"])
        net, losses, bank = fit_denoiser(net, proc, sched, cfg.cache_config(), e["steps"], t["n_chunks"],
                                         batch=t["batch"], lr=e["lr"], seed=seed, tag="teacher-erft",
                                         bank=bank, perturbation=pert, lr_decay=False)
        records = [{"command": "teacher-erft", "step": i, "loss": float(v)} for i, v in enumerate(losses)]
        err = continuation_error(net, proc, sched, cfg.cache_config(), t["n_chunks"], 64, seed + 1, bank, pert)
        records.append({"command": "teacher-erft", "heldout_perturbed_error": err})
    run.save("teacher", net, erft=bool(e["enabled"]))
    run.write_metrics("teacher-erft", records)
    return net


def _teacher(run: RunDir, needed_by: str):
    cfg = run.cfg
    proc, sched = build_domain(cfg)
    mem = cfg["teacher.memoryless"]
    if cfg["teacher.kind"] == "analytic":
        return make_teacher("analytic", proc, sched, memoryless=mem)
    net = run.load("teacher", needed_by, "teacher-erft")
    return make_teacher("trained", proc, sched, net=net, memoryless=mem)


def _stage_config(cfg, stage: str) -> StageConfig:
    s = cfg.section(stage)
    c_len = cfg["rollout.c_len"]
    return StageConfig(steps=s["steps"], batch=s["batch"], lr_gen=s["lr_gen"], lr_fake=s["lr_fake"],
                       fake_steps=s["fake_steps"], L0=cfg["curriculum.L0"], L1=cfg["curriculum.L1"],
                       s_d=cfg["curriculum.s_d"], target_len=cfg["rollout.target_len"],
                       c_len=None if c_len == "uniform" else int(c_len), seed=cfg["run.seed"])


def stage1(run: RunDir):
    cfg = run.cfg
    proc, sched = build_domain(cfg)
    teacher = _teacher(run, "stage1")
    seed = cfg["run.seed"]
    b = cfg.section("base")
    net = ChunkNet.init(net_config(cfg, proc), substream(seed, "generator-init"), scale=cfg["net.init_scale"])
    base, base_losses, _ = fit_denoiser(net, proc, sched, cfg.cache_config(), b["steps"], b["n_chunks"],
                                        batch=b["batch"], lr=b["lr"], seed=seed, tag="base")
    run.save("base", base)
    gen, fake, metrics = train_stage1(base, base.as_role("fake"), teacher, proc, sched, cfg.cache_config(),
                                      _stage_config(cfg, "stage1"))
    run.save("stage1-gen", gen)
    run.save("stage1-fake", fake)
    records = [{"command": "stage1", "phase": "base", "step": i, "loss": float(v)} for i, v in enumerate(base_losses)]
    run.write_metrics("stage1", records + _records(metrics))
    return gen


def stage2(run: RunDir):
    cfg = run.cfg
    proc, sched = build_domain(cfg)
    gen = run.load("stage1-gen", "stage2", "stage1")
    fake = run.load("stage1-fake", "stage2", "stage1")
    teacher = _teacher(run, "stage2")
    gen, _, metrics = train_stage2(gen, fake, teacher, proc, sched, cfg.cache_config(), _stage_config(cfg, "stage2"))
    run.save("stage2-gen", gen)
    run.write_metrics("stage2", _records(metrics))
    return gen


def evaluate(run: RunDir, label: str = "default"):
    cfg = run.cfg
    proc, sched = build_domain(cfg)
    name = "stage2-gen" if cfg["stage2.enabled"] else "stage1-gen"
    gen = run.load(name, "eval", "stage2" if cfg["stage2.enabled"] else "stage1")
    e = cfg.section("eval")
    cache = cfg.cache_config(bounded_positions=e["bounded_positions"])
    seed = cfg["run.seed"]
    curve = consistency_curve(gen, proc, sched, cache, n_chunks=e["n_chunks"], marks=e["marks"], seeds=e["seeds"],
                              n_prompts=e["n_prompts"], half_window=e["half_window"], master_seed=seed)
    ref = data_consistency_curve(proc, e["n_chunks"], e["marks"], seed=seed)
    _, cond = proc.sample_identity(e["n_prompts"], substream(seed, "eval-prompts", e["seeds"][0]))
    X, _ = inference_rollout(gen, sched, cache, cond, e["n_chunks"], proc.frame_dim, seed, ("eval", e["seeds"][0]))
    frames = X.reshape(len(cond), e["n_chunks"], proc.chunk_size, proc.frame_dim)
    align = float(np.mean([semantic_alignment(frames[b], cond[b], proc) for b in range(len(cond))]))
    curve_name = f"consistency-{cfg.fingerprint()}-s{seed}.csv"
    _write_atomic(run.path / "curves" / curve_name, curve.to_csv())
    summary = {
        "label": label,
        "generator": name,
        "config_fingerprint": cfg.fingerprint(),
        "curve_file": f"curves/{curve_name}",
        "seed": seed,
        "marks": [int(m) for m in curve.marks],
        "mean": [float(v) for v in curve.mean],
        "std": [float(v) for v in curve.std],
        "per_seed": curve.per_seed.tolist(),
        "data_reference": [float(v) for v in ref],
        "semantic_alignment": align,
        "cache": asdict(cache),
    }
    _write_atomic(run.path / "summary.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    run.write_metrics("eval", [{"command": "eval", "mark": int(m), "mean": float(mu), "std": float(sd)}
                               for m, mu, sd in zip(curve.marks, curve.mean, curve.std)])
    return summary


def full_pipeline(run: RunDir, label: str):
    """Everything an ablation row needs, in dependency order."""
    cfg = run.cfg
    if cfg["teacher.kind"] == "trained":
        teacher_pretrain(run)
        teacher_erft(run)
    stage1(run)
    if cfg["stage2.enabled"]:
        stage2(run)
    return evaluate(run, label)


def report(root) -> str:
    """Comparison table over every ``summary.json`` found one level below ``root``.

    When a run named ``default`` is present, each row also shows its
    difference from that run at the last mark.
    """
    root = Path(root)
    rows = []
    for summary_path in sorted(root.glob("*/summary.json")):
        with open(summary_path, encoding="utf-8") as fh:
            rows.append((summary_path.parent.name, json.load(fh)))
    if not rows:
        raise MissingPrerequisite(f"no summary.json under {root}; run `eval` or `ablate` first")
    marks = rows[0][1]["marks"]
    for name, s in rows:
        if s["marks"] != marks:
            raise InconsistentRuns(f"run {name} uses marks {s['marks']}, {rows[0][0]} uses {marks}")
    base = dict(rows).get("default")
    head = "| run | " + " | ".join(f"@{m}" for m in marks) + " | alignment |"
    sep = "|" + "---|" * (len(marks) + 2)
    if base is not None:
        head += f" vs default @{marks[-1]} |"
        sep += "---|"
    lines = [head, sep]
    for name, s in rows:
        vals = " | ".join(f"{v:.4f}" for v in s["mean"])
        line = f"| {name} | {vals} | {s['semantic_alignment']:.4f} |"
        if base is not None:
            line += f" {s['mean'][-1] - base['mean'][-1]:+.4f} |"
        lines.append(line)
    ref = rows[0][1]["data_reference"]
    line = "| data | " + " | ".join(f"{v:.4f}" for v in ref) + " | - |"
    if base is not None:
        line += " - |"
    lines.append(line)
    return "\n".join(lines) + "\n"
