"""Experiment configuration, seeded multi-round runs, ablations, sweeps and reports."""
from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as B
from . import client as C
from . import data as D
from . import metrics as MT
from . import prompts as P
from . import server as S

log = logging.getLogger(__name__)

ABLATIONS = ("full", "w/oGP", "w/oLP", "w/oSPF")
SWEEP_AXES = {"M": "pool_size", "L": "prompt_length", "N": "top_n", "lp": "prefix_length",
              "lambda1": "lambda1", "lambda2": "lambda2"}


class ConfigError(ValueError):
    pass


def _f(section: str, default, **kw):
    return field(default=default, metadata={"section": section}, **kw)


@dataclass
class ExperimentConfig:
    # scenario
    dataset: str = _f("scenario", "synthetic")
    mode: str = _f("scenario", "synchronous")
    clients: int = _f("scenario", 5)
    tasks: int = _f("scenario", 2)
    classes: int = _f("scenario", 16)
    per_class: int = _f("scenario", 60)
    data_seed: int = _f("scenario", 0)
    noise: float = _f("scenario", 0.15)
    dirichlet_alpha: float = _f("scenario", 1.0)
    private_per_client: int = _f("scenario", 2)
    classes_per_task: int = _f("scenario", 4)
    proxy_per_class: int = _f("scenario", 2)
    warmup_fraction: float = _f("scenario", 0.25)
    test_fraction: float = _f("scenario", 0.2)
    # backbone
    image_side: int = _f("backbone", 16)
    patch_side: int = _f("backbone", 4)
    embed_dim: int = _f("backbone", 64)
    depth: int = _f("backbone", 4)
    heads: int = _f("backbone", 4)
    mlp_ratio: int = _f("backbone", 4)
    pretrain_steps: int = _f("backbone", 200)
    pretrain_batch: int = _f("backbone", 32)
    pretrain_lr: float = _f("backbone", 1e-3)
    # prompts
    pool_size: int = _f("prompts", 10)
    prompt_length: int = _f("prompts", 10)
    top_n: int = _f("prompts", 1)
    prefix_length: int = _f("prompts", 5)
    attached_blocks: tuple = _f("prompts", (0, 1))
    # train
    lambda1: float = _f("train", 0.5)
    lambda2: float = _f("train", 0.5)
    epochs_global: int = _f("train", 2)
    epochs_local: int = _f("train", 2)
    batch_size: int = _f("train", 8)
    learning_rate: float = _f("train", 1e-3)
    train_mask: str = _f("train", "task")
    # fusion
    distill_steps: int = _f("fusion", 10)
    distill_lr: float = _f("fusion", 1e-3)
    proxy_batch: int = _f("fusion", 32)
    teacher_schedule: str = _f("fusion", "summed")
    init: str = _f("fusion", "mean")
    key_nudge: float = _f("fusion", 0.1)
    # run
    ablation: str = _f("run", "full")
    seeds: tuple = _f("run", (42, 1999, 2024))
    rounds_per_task: int = _f("run", 5)
    out: str = _f("run", "runs/default")

    def validate(self) -> "ExperimentConfig":
        def bad(key, why):
            raise ConfigError(f"{key}: {why} (got {getattr(self, key)!r})")

        if self.dataset not in ("synthetic", "cifar100"):
            bad("dataset", "must be synthetic or cifar100")
        if self.mode not in ("synchronous", "asynchronous"):
            bad("mode", "must be synchronous or asynchronous")
        if self.ablation not in ABLATIONS:
            bad("ablation", f"must be one of {ABLATIONS}")
        for key in ("clients", "tasks", "classes", "per_class", "pool_size", "prompt_length", "top_n",
                    "batch_size", "image_side", "patch_side", "embed_dim", "depth", "heads",
                    "mlp_ratio", "proxy_batch", "pretrain_batch", "classes_per_task"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("rounds_per_task", "distill_steps", "pretrain_steps", "prefix_length",
                    "proxy_per_class", "epochs_global", "epochs_local", "private_per_client",
                    "lambda1", "lambda2", "learning_rate", "distill_lr", "key_nudge", "pretrain_lr"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if not 0 <= self.warmup_fraction < 1:
            bad("warmup_fraction", "must lie in [0, 1)")
        if not 0 < self.test_fraction < 1:
            bad("test_fraction", "must lie in (0, 1)")
        if self.dirichlet_alpha <= 0:
            bad("dirichlet_alpha", "must be > 0")
        if self.top_n > self.pool_size:
            bad("top_n", f"exceeds pool_size {self.pool_size}")
        if self.image_side % self.patch_side:
            bad("patch_side", f"does not divide image_side {self.image_side}")
        if self.embed_dim % self.heads:
            bad("heads", f"does not divide embed_dim {self.embed_dim}")
        if any(b < 0 or b >= self.depth for b in self.attached_blocks):
            bad("attached_blocks", f"outside 0..{self.depth - 1}")
        if not self.seeds:
            bad("seeds", "need at least one seed")
        if self.teacher_schedule not in S.TEACHER_SCHEDULES:
            bad("teacher_schedule", f"must be one of {S.TEACHER_SCHEDULES}")
        if self.train_mask not in ("task", "seen"):
            bad("train_mask", "must be task or seen")
        if self.init not in S.INIT_MODES:
            bad("init", f"must be one of {S.INIT_MODES}")
        if self.mode == "synchronous" and self.classes % self.tasks:
            bad("tasks", f"must divide classes {self.classes} in synchronous mode")
        if self.mode == "asynchronous":
            if self.clients * self.private_per_client > self.classes:
                bad("private_per_client", "clients * private_per_client exceeds classes")
            public = self.classes - self.clients * self.private_per_client
            if self.private_per_client + public < self.tasks * self.classes_per_task:
                bad("classes_per_task", "private + public classes cannot fill every task")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- files ------------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for f in dataclasses.fields(self):
            sec = f.metadata["section"]
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, f.name, _fmt(getattr(self, f.name)))
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp.items(sec)]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, **overrides) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                if key not in known:
                    raise ConfigError(f"{sec}.{key}: unknown key")
                if known[key].metadata["section"] != sec:
                    raise ConfigError(f"{sec}.{key}: belongs in section [{known[key].metadata['section']}]")
                values[key] = _parse(key, raw, known[key].default)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values).validate()

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text(), **overrides)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, raw: str, default):
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw.strip()


# ------------------------------------------------------------------ pieces

def load_store(cfg: ExperimentConfig, data_dir=None) -> D.SampleStore:
    if cfg.dataset == "cifar100":
        path = D.data_dir(data_dir) / "train.bin"
        return D.load_cifar100(path)
    return D.gen_synthetic(cfg.classes, cfg.per_class, cfg.image_side, seed=cfg.data_seed, noise=cfg.noise)


def build_scenario(cfg: ExperimentConfig, store: D.SampleStore, seed: int):
    """Reserve proxy/warmup holdouts, then split the rest into per-client task streams."""
    proxy, warm, rest = D.reserve_holdouts(store, cfg.proxy_per_class, cfg.warmup_fraction, seed)
    if cfg.mode == "synchronous":
        plan = D.split_synchronous(rest, cfg.clients, cfg.tasks, cfg.dirichlet_alpha, seed, cfg.test_fraction)
    else:
        plan = D.split_asynchronous(rest, cfg.clients, cfg.private_per_client, cfg.classes_per_task,
                                    cfg.tasks, seed, cfg.test_fraction)
    plan.proxy = [int(o) for o in proxy.origin]
    plan.warmup = [int(o) for o in warm.origin]
    return plan, proxy, warm


def backbone_config(cfg: ExperimentConfig, seed: int) -> B.BackboneConfig:
    channels = 3
    return B.BackboneConfig(image_side=cfg.image_side, channels=channels, patch_side=cfg.patch_side,
                            embed_dim=cfg.embed_dim, depth=cfg.depth, heads=cfg.heads,
                            mlp_ratio=cfg.mlp_ratio, seed=seed)


_BACKBONES: dict = {}


def pretrained_backbone(cfg: ExperimentConfig, warm: D.SampleStore, seed: int) -> B.BackboneWeights:
    """Warm up and freeze; memoised because ablation runs share the same backbone."""
    bcfg = backbone_config(cfg, seed)
    key = (bcfg, cfg.pretrain_steps, cfg.pretrain_batch, cfg.pretrain_lr, cfg.dataset,
           cfg.classes, cfg.per_class, cfg.data_seed, cfg.noise, tuple(warm.origin.tolist()))
    if key not in _BACKBONES:
        if len(warm) == 0 or cfg.pretrain_steps == 0:
            w = B.init_weights(bcfg)
            w.freeze()
            w.metadata = {"warmup_accuracy": float("nan"), "warmup_steps": 0,
                          "warmup_samples": len(warm), "warmup_classes": 0}
        else:
            w = B.pretrain_and_freeze(bcfg, warm.images, warm.labels, cfg.pretrain_steps,
                                      batch_size=cfg.pretrain_batch, learning_rate=cfg.pretrain_lr, seed=seed)
        _BACKBONES[key] = w
    return _BACKBONES[key]


def apply_ablation(cfg: ExperimentConfig, clients, server: S.Server) -> dict:
    """Switch pipeline stages off per the ablation flag; returns the stage map."""
    stages = {"global_phase": True, "local_phase": True, "fusion": "selective"}
    if cfg.ablation == "w/oGP":
        stages.update(global_phase=False, fusion="none")
        for c in clients:
            c.use_global_prompts = False
    elif cfg.ablation == "w/oLP":
        stages["local_phase"] = False
        for c in clients:
            c.use_local_prompts = False
    elif cfg.ablation == "w/oSPF":
        stages["fusion"] = "fedavg"
    server.method = stages["fusion"]
    return stages


# ------------------------------------------------------------------ results

@dataclass
class SeedResult:
    seed: int
    directory: Path
    complete: bool
    matrix: MT.AccuracyMatrix
    ledgers: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str = ""


@dataclass
class RunArtifact:
    config: ExperimentConfig
    directory: Path
    seeds: list[SeedResult]
    summary: dict

    @property
    def complete(self) -> bool:
        return all(s.complete for s in self.seeds)


SUMMARY_KEYS = ("final_round", "kr_temporal", "kr_spatial", "global_average", "personalized_average",
                "min_client_personalized", "chance")


def seed_summary(matrix: MT.AccuracyMatrix, num_seen: dict[int, int]) -> dict:
    """Final-round numbers used by reports: retention, Table-1 average and personalised accuracy."""
    final = max(matrix.rounds())
    per_client = {}
    for c in matrix.clients():
        hits = [matrix.entries[k] for k in matrix.entries if k[0] == c and k[1] == final and k[3] == "local"]
        per_client[c] = sum(h[0] for h in hits) / sum(h[1] for h in hits)
    pers = MT.average_task_accuracy(matrix, final, "local")["average"]
    return {
        "final_round": final,
        "kr_temporal": MT.kr_or_nan(MT.kr_temporal, matrix, final),
        "kr_spatial": MT.kr_or_nan(MT.kr_spatial, matrix, final),
        "global_average": MT.average_task_accuracy(matrix, final, "global")["average"],
        "personalized_average": pers,
        "min_client_personalized": min(per_client.values()),
        "chance": max(1.0 / n for n in num_seen.values()),
        **{f"client{c}_personalized": v for c, v in sorted(per_client.items())},
    }


def average_summaries(summaries: list[dict]) -> dict:
    keys = [k for k in summaries[0] if all(k in s for s in summaries)]
    return {k: math.fsum(s[k] for s in summaries) / len(summaries) for k in keys}


def _summary_text(d: dict) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in d.items())


def parse_summary(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = float(v)
    return out


# --------------------------------------------------------------------- run

def _trace_lines(rep: C.PhaseReport, round_index: int) -> list[str]:
    head = f"round {round_index} client {rep.client_id} task {rep.task} phase {rep.phase}"
    lines = [f"{head} train_accuracy = {rep.train_accuracy!r}"]
    for i, (tot, ce, sur) in enumerate(rep.steps):
        lines.append(f"{head} step {i} total = {tot!r} ce = {ce!r} surrogate = {sur!r}")
    lines.append(f"{head} checksum global {rep.global_checksum_before} -> {rep.global_checksum_after}")
    lines.append(f"{head} checksum local {rep.local_checksum_before} -> {rep.local_checksum_after}")
    return lines


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, store: D.SampleStore | None = None) -> SeedResult:
    out.mkdir(parents=True, exist_ok=True)
    matrix = MT.AccuracyMatrix()
    result = SeedResult(seed, out, False, matrix)
    timings = {}
    traces: list[str] = []
    contracts: list[str] = []
    t_start = time.perf_counter()
    try:
        store = load_store(cfg) if store is None else store
        plan, proxy, warm = build_scenario(cfg, store, seed)
        (out / "manifest.txt").write_text(plan.to_manifest())
        t0 = time.perf_counter()
        bb = pretrained_backbone(cfg, warm, seed)
        timings["pretrain"] = time.perf_counter() - t0
        B.save_checkpoint(bb, out / "backbone.bin")
        bb_sum = bb.checksum()
        contracts.append(f"backbone start = {bb_sum}")
        num_classes = int(store.labels.max()) + 1
        clients = [C.make_client(i, bb, num_classes, pool_size=cfg.pool_size, prompt_length=cfg.prompt_length,
                                 prefix_length=cfg.prefix_length, attached_blocks=cfg.attached_blocks,
                                 seed=seed, learning_rate=cfg.learning_rate) for i in range(cfg.clients)]
        fusion = S.FusionConfig(cfg.distill_steps, cfg.distill_lr, cfg.proxy_batch, cfg.teacher_schedule,
                                cfg.init, cfg.key_nudge, cfg.top_n, seed)
        server = S.Server(bb, proxy.images, fusion, "none" if cfg.ablation == "w/oGP" else "selective")
        stages = apply_ablation(cfg, clients, server)
        tcfg = C.TrainConfig(cfg.lambda1, cfg.lambda2, cfg.epochs_global, cfg.epochs_local,
                             cfg.batch_size, cfg.top_n, cfg.learning_rate, seed, cfg.train_mask)
        task_store = {k: store.select_origins(t.train) for k, t in plan.streams.items()}
        test_store = {k: store.select_origins(t.test) for k, t in plan.streams.items()}
        rounds = max(cfg.rounds_per_task, 1)
        retention_lines = []
        for n in range(cfg.tasks):
            for c in clients:
                c.task_cursor = n
                if cfg.rounds_per_task == 0:
                    c.see(plan.task(c.client_id, n).class_set)
            for k in range(rounds):
                r = n * rounds + k
                t0 = time.perf_counter()
                fused = None
                if cfg.rounds_per_task > 0:
                    for c in clients:
                        train = task_store[(c.client_id, n)]
                        if len(train) == 0:
                            continue  # a Dirichlet share can be empty
                        if stages["global_phase"]:
                            C.unfreeze_global(c)
                            rep = C.global_phase(c, train, tcfg)
                            traces += _trace_lines(rep, r)
                            contracts.append(f"round {r} client {c.client_id} global_phase local_unchanged = "
                                             f"{int(rep.local_checksum_before == rep.local_checksum_after)}")
                            C.freeze_global(c)
                        if stages["local_phase"]:
                            frozen = c.global_pool.checksum()
                            rep = C.local_phase(c, train, tcfg)
                            traces += _trace_lines(rep, r)
                            contracts.append(f"round {r} client {c.client_id} local_phase global_unchanged = "
                                             f"{int(rep.global_checksum_after == frozen)}")
                    ledger, fused = server.aggregate(S.collect(clients) if stages["fusion"] != "none" else {},
                                                     [c.client_id for c in clients], r, n)
                    result.ledgers.append(ledger)
                timings[f"round {r} train"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                for c in clients:
                    if not c.seen_classes:
                        c.see(plan.task(c.client_id, n).class_set)
                    for t in range(n + 1):
                        test = test_store[(c.client_id, t)]
                        if len(test) == 0:
                            continue
                        matrix.record(c.client_id, r, t, "local",
                                      *MT.evaluate("personalized", c, test, top_n=cfg.top_n))
                        matrix.record(c.client_id, r, t, "global",
                                      *MT.evaluate("global", c, test, pool_override=fused, top_n=cfg.top_n))
                S.distribute(clients, fused)
                timings[f"round {r} eval"] = time.perf_counter() - t0
                retention_lines.append(MT.retention(matrix, r).to_text())
        contracts.append(f"backbone end = {bb.checksum()}")
        contracts.append(f"backbone unchanged = {int(bb.checksum() == bb_sum)}")
        result.summary = seed_summary(matrix, {c.client_id: len(c.seen_classes) for c in clients})
        (out / "retention.txt").write_text("\n".join(retention_lines))
        (out / "accounting.txt").write_text(MT.accounting(clients, result.ledgers).to_text())
        for c in clients:
            (out / f"client{c.client_id}_local_pool.bin").write_bytes(c.local_pool.to_bytes())
        (out / "global_pool.bin").write_bytes(clients[0].global_pool.to_bytes())
        result.complete = True
    except Exception as exc:  # persist what we have, flag incomplete
        result.error = f"{type(exc).__name__}: {exc}"
        log.error("seed %d aborted: %s", seed, result.error)
        (out / "error.txt").write_text(traceback.format_exc())
    matrix.save(out / "accuracy.csv")
    (out / "ledgers.txt").write_text("\n".join(l.to_text() for l in result.ledgers))
    (out / "traces.txt").write_text("\n".join(traces) + "\n")
    (out / "contracts.txt").write_text("\n".join(contracts) + "\n")
    (out / "summary.txt").write_text(_summary_text(result.summary))
    (out / "status.txt").write_text(("complete" if result.complete else "incomplete") + "\n")
    timings["total"] = time.perf_counter() - t_start
    (out / "timings.txt").write_text("".join(f"{k} = {v:.3f}\n" for k, v in timings.items()))
    return result


def run_experiment(cfg: ExperimentConfig, out=None) -> RunArtifact:
    cfg.validate()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    store = load_store(cfg)
    seeds = []
    for seed in cfg.seeds:  # sequential by design
        log.info("seed %d -> %s", seed, out)
        seeds.append(run_seed(cfg, seed, out / f"seed_{seed}", store))
    done = [s.summary for s in seeds if s.complete]
    summary = average_summaries(done) if done else {}
    (out / "summary.txt").write_text(_summary_text(summary))
    (out / "status.txt").write_text(
        ("complete" if all(s.complete for s in seeds) else "incomplete") + "\n")
    return RunArtifact(cfg, out, seeds, summary)


# ------------------------------------------------------------------- sweep

def sweep(cfg: ExperimentConfig, axis: str, values, out=None) -> dict:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: must be one of {sorted(SWEEP_AXES)} (got {axis!r})")
    values = list(values)
    if not values:
        raise ConfigError("values: empty sweep")
    name = SWEEP_AXES[axis]
    out = Path(out or cfg.out) / f"sweep_{axis}"
    grid = {}
    for v in values:
        v = _parse(name, str(v), getattr(cfg, name))
        art = run_experiment(cfg.replace(**{name: v}), out / f"{axis}={v}")
        grid[v] = art
    rows = ["value,kr_spatial,kr_temporal,global_average,personalized_average"]
    for v, art in grid.items():
        s = art.summary
        rows.append(",".join([str(v)] + [repr(s.get(k, float("nan"))) for k in
                                         ("kr_spatial", "kr_temporal", "global_average", "personalized_average")]))
    (out / "grid.csv").write_text("\n".join(rows) + "\n")
    return grid


# ------------------------------------------------------------------ report

def report(artifact_dir) -> dict:
    """Render the per-task table, KR series and accounting from persisted files only."""
    root = Path(artifact_dir)
    seed_dirs = sorted(p for p in root.glob("seed_*") if p.is_dir())
    if not seed_dirs:
        raise FileNotFoundError(f"{root}: no seed directories")
    partial = any((d / "status.txt").read_text().strip() != "complete" for d in seed_dirs)
    matrices = {d.name: MT.AccuracyMatrix.load(d / "accuracy.csv") for d in seed_dirs}
    cfg = ExperimentConfig.load(root / "config.ini") if (root / "config.ini").exists() else None
    method = cfg.ablation if cfg else "unknown"

    tables = {}
    for name, m in matrices.items():
        if m.entries:
            tables[name] = MT.average_task_accuracy(m, max(m.rounds()), "global")
    task_ids = sorted({t for tab in tables.values() for t in tab if t != "average"})
    lines = [f"# per-task accuracy of the fused global model at the final round ({method})"]
    if partial:
        lines.append("# PARTIAL: at least one seed is incomplete")
    lines.append("seed," + ",".join(f"task{t}" for t in task_ids) + ",Average")
    for name, tab in tables.items():
        lines.append(name + "," + ",".join(f"{100 * tab[t]:.2f}" for t in task_ids)
                     + f",{100 * tab['average']:.2f}")
    if tables:
        mean = {k: math.fsum(t[k] for t in tables.values()) / len(tables) for k in task_ids + ["average"]}
        lines.append("mean," + ",".join(f"{100 * mean[t]:.2f}" for t in task_ids) + f",{100 * mean['average']:.2f}")
    table = "\n".join(lines) + "\n"

    series = ["method,seed,round,kr_temporal,kr_spatial"]
    values = {}
    for name, m in matrices.items():
        for r in m.rounds():
            kt, ks = MT.kr_or_nan(MT.kr_temporal, m, r), MT.kr_or_nan(MT.kr_spatial, m, r)
            values[(name, r)] = (kt, ks)
            series.append(f"{method},{name},{r},{kt!r},{ks!r}")
    series_text = "\n".join(series) + "\n"

    acct = []
    for d in seed_dirs:
        f = d / "accounting.txt"
        if f.exists():
            acct.append(f"[{d.name}]")
            acct.append(f.read_text().rstrip())
    acct_text = "\n".join(acct) + "\n"

    rep = root / "report"
    rep.mkdir(exist_ok=True)
    (rep / "table.txt").write_text(table)
    (rep / "kr_series.csv").write_text(series_text)
    (rep / "accounting.txt").write_text(acct_text)
    return {"table": tables, "series": values, "partial": partial, "text": table}
