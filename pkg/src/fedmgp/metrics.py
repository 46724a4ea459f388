"""Accuracy matrices, knowledge-retention ratios and parameter accounting."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import prompts as P

MODELS = ("local", "global")
CSV_FIELDS = ("client", "round", "task", "model", "correct", "total")


class AllDenominatorsZeroError(ZeroDivisionError):
    pass


class MissingEntryError(KeyError):
    pass


@dataclass
class AccuracyMatrix:
    """(client, round, task, model) -> (correct, total). ``local`` is the personalised path."""
    entries: dict[tuple[int, int, int, str], tuple[int, int]] = field(default_factory=dict)

    def record(self, client: int, round_index: int, task: int, model: str, correct: int, total: int) -> None:
        if model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {model!r}")
        if total <= 0 or not 0 <= correct <= total:
            raise ValueError(f"bad counts {correct}/{total}")
        self.entries[(int(client), int(round_index), int(task), model)] = (int(correct), int(total))

    def accuracy(self, client: int, round_index: int, task: int, model: str) -> float:
        key = (client, round_index, task, model)
        if key not in self.entries:
            raise MissingEntryError(f"no accuracy for client {client} round {round_index} task {task} {model}")
        c, t = self.entries[key]
        return c / t

    def clients(self) -> list[int]:
        return sorted({k[0] for k in self.entries})

    def rounds(self) -> list[int]:
        return sorted({k[1] for k in self.entries})

    def current_task(self, client: int, round_index: int) -> int:
        tasks = [k[2] for k in self.entries if k[0] == client and k[1] == round_index]
        if not tasks:
            raise MissingEntryError(f"client {client} has no entries at round {round_index}")
        return max(tasks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for key in sorted(self.entries):
            w.writerow([*key, *self.entries[key]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        m = cls()
        for row in csv.DictReader(io.StringIO(text)):
            m.record(int(row["client"]), int(row["round"]), int(row["task"]), row["model"],
                     int(row["correct"]), int(row["total"]))
        return m

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "AccuracyMatrix":
        return cls.from_csv(Path(path).read_text())


def evaluate(path: str, client, store, pool_override=None, top_n: int = 5) -> tuple[int, int]:
    """(correct, total) of one inference path on a test store."""
    from . import client as C

    if len(store) == 0:
        raise ValueError("empty test set")
    if path == "personalized":
        preds = C.infer_personalized(client, store.images, top_n=top_n, origins=store.origin)
    elif path == "global":
        preds = C.infer_global(client, store.images, pool_override, top_n=top_n, origins=store.origin)
    else:
        raise ValueError(f"unknown inference path {path!r}")
    return int(np.sum(np.asarray(preds) == store.labels)), len(store)


def _mean_ratio(pairs: list[tuple[int, float, float]], what: str) -> float:
    ratios = []
    for client, num, den in pairs:
        if den == 0:
            warnings.warn(f"{what}: client {client} has zero denominator; excluded")
            continue
        ratios.append(num / den)
    if not ratios:
        raise AllDenominatorsZeroError(f"{what}: every denominator is zero")
    return math.fsum(ratios) / len(ratios)


def kr_temporal(matrix: AccuracyMatrix, round_index: int, clients=None) -> float:
    """Mean over clients of personalised task-0 accuracy at r over the same at round 0."""
    clients = matrix.clients() if clients is None else clients
    return _mean_ratio([(c, matrix.accuracy(c, round_index, 0, "local"),
                         matrix.accuracy(c, 0, 0, "local")) for c in clients], "KR_t")


def kr_spatial(matrix: AccuracyMatrix, round_index: int, clients=None) -> float:
    """Mean over clients of fused-pool accuracy over personalised accuracy on the current task."""
    clients = matrix.clients() if clients is None else clients
    pairs = []
    for c in clients:
        t = matrix.current_task(c, round_index)
        pairs.append((c, matrix.accuracy(c, round_index, t, "global"),
                      matrix.accuracy(c, round_index, t, "local")))
    return _mean_ratio(pairs, "KR_s")


@dataclass
class RetentionReport:
    round: int
    kr_t: float
    kr_s: float
    per_client_t: dict[int, float]
    per_client_s: dict[int, float]

    def to_text(self) -> str:
        lines = [f"round = {self.round}", f"KR_t = {self.kr_t!r}", f"KR_s = {self.kr_s!r}"]
        for c in sorted(self.per_client_t):
            lines.append(f"client {c} KR_t = {self.per_client_t[c]!r} KR_s = {self.per_client_s[c]!r}")
        return "\n".join(lines) + "\n"


def kr_or_nan(fn, matrix: AccuracyMatrix, round_index: int) -> float:
    """KR value for reports; NaN when every client's denominator is zero."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fn(matrix, round_index)
    except AllDenominatorsZeroError:
        return float("nan")


def _safe_ratio(num: float, den: float) -> float:
    return num / den if den else float("nan")


def retention(matrix: AccuracyMatrix, round_index: int) -> RetentionReport:
    per_t, per_s = {}, {}
    for c in matrix.clients():
        per_t[c] = _safe_ratio(matrix.accuracy(c, round_index, 0, "local"), matrix.accuracy(c, 0, 0, "local"))
        t = matrix.current_task(c, round_index)
        per_s[c] = _safe_ratio(matrix.accuracy(c, round_index, t, "global"),
                               matrix.accuracy(c, round_index, t, "local"))
    return RetentionReport(round_index, kr_or_nan(kr_temporal, matrix, round_index),
                           kr_or_nan(kr_spatial, matrix, round_index), per_t, per_s)


def average_task_accuracy(matrix: AccuracyMatrix, round_index: int, model: str = "global",
                          clients=None) -> dict:
    """Per-task mean over clients plus the overall average (mean of the task means)."""
    clients = matrix.clients() if clients is None else clients
    tasks = sorted({k[2] for k in matrix.entries if k[1] == round_index and k[3] == model})
    if not tasks:
        raise MissingEntryError(f"no {model} entries at round {round_index}")
    missing = [(c, t) for t in tasks for c in clients if (c, round_index, t, model) not in matrix.entries]
    if missing:
        raise MissingEntryError(f"missing {model} entries at round {round_index}: {missing}")
    out = {t: math.fsum(matrix.accuracy(c, round_index, t, model) for c in clients) / len(clients)
           for t in tasks}
    out["average"] = math.fsum(out[t] for t in tasks) / len(tasks)
    return out


# -------------------------------------------------------------- accounting

@dataclass
class Accounting:
    per_client: dict[int, P.ParamCount]
    heads: dict[int, int]
    transmitted_per_round: dict[int, int]  # round -> parameters uploaded per client

    def to_text(self) -> str:
        lines = []
        for c in sorted(self.per_client):
            pc = self.per_client[c]
            lines.append(f"client {c} global_prompts = {pc.global_prompts} global_keys = {pc.global_keys} "
                         f"local_prompts = {pc.local_prompts} local_keys = {pc.local_keys} "
                         f"trainable = {pc.trainable} heads = {self.heads[c]}")
        for r in sorted(self.transmitted_per_round):
            lines.append(f"round {r} transmitted_per_client = {self.transmitted_per_round[r]}")
        return "\n".join(lines) + "\n"


def count_client(state) -> P.ParamCount:
    """Enumerate live tensors of a client's pools."""
    g = state.global_pool
    gp = sum(t.size for t in g.prompts) if state.use_global_prompts else 0
    gk = sum(t.size for t in g.keys) if state.use_global_prompts else 0
    lk = sum(e.key.size for e in state.local_pool.entries.values())
    lp = sum(t.size for e in state.local_pool.entries.values() for pair in e.prefixes.values() for t in pair)
    return P.ParamCount(gp, gk, lp, lk)


def accounting(clients, ledgers) -> Accounting:
    per_round = {}
    for led in ledgers:
        if not led.complete:
            raise ValueError(f"round {led.round} ledger incomplete")
        per_round[led.round] = max((r.parameters for r in led.receipts), default=0)
    return Accounting({c.client_id: count_client(c) for c in clients},
                      {c.client_id: sum(t.size for t in c.head_tensors()) for c in clients},
                      per_round)
