"""Sample stores, CIFAR-100 binary ingestion and federated continual task streams."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3074
CIFAR_SIDE = 32


class CorruptFileError(ValueError):
    pass


class ScenarioConfigError(ValueError):
    pass


@dataclass
class SampleStore:
    images: np.ndarray  # (n, H, W, C) in [0, 1]
    labels: np.ndarray  # (n,) int64
    origin: np.ndarray  # (n,) int64 position in the source

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.origin)):
            raise ValueError("images, labels and origin lengths differ")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, rows) -> "SampleStore":
        rows = np.asarray(rows, dtype=np.int64)
        return SampleStore(self.images[rows], self.labels[rows], self.origin[rows])

    def select_origins(self, origins) -> "SampleStore":
        pos = {int(o): i for i, o in enumerate(self.origin)}
        return self.subset([pos[int(o)] for o in origins])

    def rows_of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def load_cifar100(path) -> SampleStore:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        bad = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise CorruptFileError(
            f"{path}: size {len(raw)} not a multiple of {RECORD_BYTES}; partial record at offset {bad}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    n = rec.shape[0]
    labels = rec[:, 1].astype(np.int64)
    pixels = rec[:, 2:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return SampleStore(pixels.astype(np.float64) / 255.0, labels, np.arange(n))


def data_dir(cli_value: str | None = None) -> Path:
    return Path(cli_value or os.environ.get("DATA_DIR", "data"))


def gen_synthetic(classes: int, per_class: int, image_side: int = 32, seed: int = 0,
                  channels: int = 3, noise: float = 0.15) -> SampleStore:
    """Each class is a seeded random template; samples add uniform noise and clamp to [0, 1]."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    templates = rng.random((classes, image_side, image_side, channels))
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    noise_arr = rng.uniform(-noise, noise, size=(n, image_side, image_side, channels))
    images = np.clip(templates[labels] + noise_arr, 0.0, 1.0)
    return SampleStore(images, labels, np.arange(n))


# -------------------------------------------------------------- scenarios

@dataclass
class TaskSpec:
    client_id: int
    task_index: int
    class_set: list[int]
    train: list[int]  # origin indices
    test: list[int]


@dataclass
class ScenarioPlan:
    mode: str
    clients: int
    tasks: int
    seed: int
    streams: dict[tuple[int, int], TaskSpec] = field(default_factory=dict)
    proxy: list[int] = field(default_factory=list)
    warmup: list[int] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    private_sets: list[list[int]] = field(default_factory=list)
    public_classes: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)  # async surplus classes not placed in any task

    def task(self, client: int, n: int) -> TaskSpec:
        return self.streams[(client, n)]

    def client_origins(self, client: int) -> list[int]:
        out = []
        for n in range(self.tasks):
            t = self.streams[(client, n)]
            out += t.train + t.test
        return out

    def all_assigned(self) -> list[int]:
        out = []
        for c in range(self.clients):
            out += self.client_origins(c)
        return out

    def to_manifest(self) -> str:
        """Plain-text manifest; one line per (client, task, split) with origin indices."""
        lines = [f"mode = {self.mode}", f"clients = {self.clients}", f"tasks = {self.tasks}",
                 f"seed = {self.seed}"]
        lines += [f"param.{k} = {v}" for k, v in sorted(self.params.items())]
        lines.append("proxy = " + " ".join(map(str, self.proxy)))
        lines.append("warmup = " + " ".join(map(str, self.warmup)))
        for c, p in enumerate(self.private_sets):
            lines.append(f"client {c} private = " + " ".join(map(str, p)))
        if self.public_classes:
            lines.append("public = " + " ".join(map(str, self.public_classes)))
        if self.dropped:
            lines.append("dropped = " + " ".join(map(str, self.dropped)))
        for (c, n) in sorted(self.streams):
            t = self.streams[(c, n)]
            lines.append(f"client {c} task {n} classes = " + " ".join(map(str, t.class_set)))
            lines.append(f"client {c} task {n} train = " + " ".join(map(str, t.train)))
            lines.append(f"client {c} task {n} test = " + " ".join(map(str, t.test)))
        return "\n".join(lines) + "\n"


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer shares summing to ``total``; leftover units go to largest fractional parts (ties: lower index)."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    left = total - int(base.sum())
    if left:
        frac = raw - base
        order = np.argsort(-frac, kind="stable")[:left]
        base[order] += 1
    return base


def dirichlet_shares(n_samples: int, clients: int, alpha: float, seed: int, label: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xD1, int(label)])
    return largest_remainder(rng.dirichlet(np.full(clients, float(alpha))), n_samples)


def _train_test(origins: list[int], test_fraction: float, rng) -> tuple[list[int], list[int]]:
    origins = [origins[i] for i in rng.permutation(len(origins))]
    n_test = int(round(test_fraction * len(origins)))
    return sorted(origins[n_test:]), sorted(origins[:n_test])


def split_synchronous(store: SampleStore, clients: int, tasks: int, alpha: float, seed: int,
                      test_fraction: float = 0.2) -> ScenarioPlan:
    classes = store.classes
    if len(classes) % tasks:
        raise ScenarioConfigError(f"{len(classes)} classes not divisible into {tasks} tasks")
    rng = np.random.default_rng([seed, 0x5C])
    perm = [classes[i] for i in rng.permutation(len(classes))]
    per_task = len(classes) // tasks
    owned: dict[tuple[int, int], list[int]] = {(c, n): [] for c in range(clients) for n in range(tasks)}
    for n in range(tasks):
        for label in perm[n * per_task:(n + 1) * per_task]:
            rows = store.rows_of_class(label)
            if len(rows) < clients:
                warnings.warn(f"class {label} has {len(rows)} samples for {clients} clients; some shares empty")
            shares = dirichlet_shares(len(rows), clients, alpha, seed, label)
            crng = np.random.default_rng([seed, 0x5D, int(label)])
            rows = rows[crng.permutation(len(rows))]
            start = 0
            for c, k in enumerate(shares):
                owned[(c, n)] += [int(o) for o in store.origin[rows[start:start + k]]]
                start += k
    plan = ScenarioPlan("synchronous", clients, tasks, seed,
                        params={"alpha": alpha, "test_fraction": test_fraction})
    for (c, n), origins in owned.items():
        trng = np.random.default_rng([seed, 0x77, c, n])
        train, test = _train_test(sorted(origins), test_fraction, trng)
        plan.streams[(c, n)] = TaskSpec(c, n, sorted(perm[n * per_task:(n + 1) * per_task]), train, test)
    return plan


def split_asynchronous(store: SampleStore, clients: int, private_per_client: int,
                       classes_per_task: int, tasks: int, seed: int,
                       test_fraction: float = 0.2) -> ScenarioPlan:
    classes = store.classes
    n_cls = len(classes)
    if clients * private_per_client > n_cls:
        raise ScenarioConfigError(
            f"clients*private_per_client = {clients * private_per_client} exceeds {n_cls} classes")
    public_count = n_cls - clients * private_per_client
    need = tasks * classes_per_task
    if private_per_client + public_count < need:
        raise ScenarioConfigError(
            f"private_per_client + public_count = {private_per_client + public_count} "
            f"< tasks*classes_per_task = {need}")
    rng = np.random.default_rng([seed, 0xA5])
    perm = [classes[i] for i in rng.permutation(n_cls)]
    privates = [perm[c * private_per_client:(c + 1) * private_per_client] for c in range(clients)]
    public = perm[clients * private_per_client:]
    # per client, per class: origin indices it owns
    owned: list[dict[int, list[int]]] = [dict() for _ in range(clients)]
    for c in range(clients):
        for label in privates[c]:
            owned[c][label] = [int(o) for o in store.origin[store.rows_of_class(label)]]
    for label in public:
        rows = store.rows_of_class(label)
        prng = np.random.default_rng([seed, 0xA6, int(label)])
        rows = rows[prng.permutation(len(rows))]
        for c, part in enumerate(np.array_split(rows, clients)):
            owned[c][label] = [int(o) for o in store.origin[part]]
    plan = ScenarioPlan("asynchronous", clients, tasks, seed, params={
        "private_per_client": private_per_client, "public_count": public_count,
        "classes_per_task": classes_per_task, "test_fraction": test_fraction})
    plan.private_sets = [sorted(p) for p in privates]
    plan.public_classes = sorted(public)
    dropped = []
    for c in range(clients):
        mine = sorted(privates[c]) + sorted(public)
        crng = np.random.default_rng([seed, 0xA7, c])
        mine = [mine[i] for i in crng.permutation(len(mine))]
        dropped += [o for label in mine[need:] for o in owned[c][label]]
        for n in range(tasks):
            cls = sorted(mine[n * classes_per_task:(n + 1) * classes_per_task])
            origins = sorted(o for label in cls for o in owned[c][label])
            trng = np.random.default_rng([seed, 0x77, c, n])
            train, test = _train_test(origins, test_fraction, trng)
            plan.streams[(c, n)] = TaskSpec(c, n, cls, train, test)
    plan.dropped = sorted(dropped)
    return plan


def reserve_holdouts(store: SampleStore, proxy_per_class: int, warmup_fraction: float,
                     seed: int) -> tuple[SampleStore, SampleStore, SampleStore]:
    """Remove the server proxy set and the backbone warmup set before any partitioning."""
    rng = np.random.default_rng([seed, 0x40])
    proxy, warm, rest = [], [], []
    for label in store.classes:
        rows = store.rows_of_class(label)
        rows = rows[rng.permutation(len(rows))]
        n_warm = int(np.floor(warmup_fraction * len(rows)))
        if proxy_per_class + n_warm > len(rows):
            raise ScenarioConfigError(
                f"class {label}: {len(rows)} samples cannot cover {proxy_per_class} proxy + {n_warm} warmup")
        proxy += rows[:proxy_per_class].tolist()
        warm += rows[proxy_per_class:proxy_per_class + n_warm].tolist()
        rest += rows[proxy_per_class + n_warm:].tolist()
    return store.subset(sorted(proxy)), store.subset(sorted(warm)), store.subset(sorted(rest))
