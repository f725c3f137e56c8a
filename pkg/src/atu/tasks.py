"""Task families, task vectorization and the task text format.

Regression tasks come from the sinusoid family ``y = A sin(w x + b)``.
Classification tasks are drawn from a pool of isotropic Gaussian blobs, a
vector-valued stand-in for few-shot image classes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SINE = "sine"
SYNTH_CLASS = "synth-class"

X_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SineParams:
    amplitude: float
    frequency: float
    phase: float

    def __call__(self, x):
        return self.amplitude * np.sin(self.frequency * np.asarray(x) + self.phase)


@dataclass(frozen=True)
class DomainRanges:
    amplitude: tuple[float, float] = (0.1, 5.0)
    frequency: tuple[float, float] = (0.8, 1.2)
    phase: tuple[float, float] = (0.0, float(np.pi))
    x: tuple[float, float] = X_RANGE

    def __post_init__(self) -> None:
        for name in ("amplitude", "frequency", "phase", "x"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} range [{lo}, {hi}] is empty or not finite")


DEFAULT_RANGES = DomainRanges()

# Cross-domain meta-test presets; the unnamed ranges stay at their defaults.
DOMAIN_PRESETS: dict[str, DomainRanges] = {
    "default": DEFAULT_RANGES,
    "frequency": replace(DEFAULT_RANGES, frequency=(0.4, 0.8)),
    "amplitude": replace(DEFAULT_RANGES, amplitude=(5.0, 6.0)),
    "phase": replace(DEFAULT_RANGES, phase=(-float(np.pi), 0.0)),
}


def domain_ranges(name: str) -> DomainRanges:
    try:
        return DOMAIN_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown domain preset {name!r}; known: {sorted(DOMAIN_PRESETS)}") from None


@dataclass
class Task:
    """A support set and a query set.

    ``support_x``/``query_x`` are ``(n, d)`` arrays; for the sine family
    ``y`` is ``(n, 1)``, for classification it holds integer labels ``(n,)``.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    family: str = SINE
    params: SineParams | None = None
    classes: tuple[int, ...] = field(default=())

    @property
    def k_support(self) -> int:
        return len(self.support_x)

    @property
    def k_query(self) -> int:
        return len(self.query_x)


def _sort_pairs(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    order = np.lexsort((y, x))  # x ascending, ties by y
    return x[order], y[order]


def sine_task(params: SineParams, support_x, query_x) -> Task:
    sx = np.asarray(support_x, dtype=np.float64).reshape(-1, 1)
    qx = np.asarray(query_x, dtype=np.float64).reshape(-1, 1)
    return Task(sx, params(sx), qx, params(qx), SINE, params)


def sample_sine_params(rng: np.random.Generator, ranges: DomainRanges = DEFAULT_RANGES) -> SineParams:
    a = rng.uniform(*ranges.amplitude)
    w = rng.uniform(*ranges.frequency)
    b = rng.uniform(*ranges.phase)
    return SineParams(float(a), float(w), float(b))


def sample_sine_task(
    rng: np.random.Generator,
    ranges: DomainRanges = DEFAULT_RANGES,
    k_support: int = 10,
    k_query: int = 10,
) -> Task:
    if k_support < 1 or k_query < 1:
        raise ValueError("k_support and k_query must be at least 1")
    p = sample_sine_params(rng, ranges)
    x = rng.uniform(ranges.x[0], ranges.x[1], size=k_support + k_query)
    return sine_task(p, x[:k_support], x[k_support:])


def sample_sine_tasks(
    rng: np.random.Generator,
    n: int,
    ranges: DomainRanges = DEFAULT_RANGES,
    k_support: int = 10,
    k_query: int = 10,
) -> list[Task]:
    return [sample_sine_task(rng, ranges, k_support, k_query) for _ in range(n)]


def query_grid(n_query: int = 100, x_range: tuple[float, float] = X_RANGE) -> np.ndarray:
    return np.linspace(x_range[0], x_range[1], n_query)


def sample_meta_test_set(
    rng: np.random.Generator,
    ranges: DomainRanges = DEFAULT_RANGES,
    k: int = 10,
    n_tasks: int = 100,
    n_query: int = 100,
) -> list[Task]:
    """Meta-test tasks: ``k`` random support points, queries on an even grid."""
    grid = query_grid(n_query)
    tasks = []
    for _ in range(n_tasks):
        p = sample_sine_params(rng, ranges)
        sx = rng.uniform(ranges.x[0], ranges.x[1], size=k)
        tasks.append(sine_task(p, sx, grid))
    return tasks


# ---------------------------------------------------------------------------
# vectorization
# ---------------------------------------------------------------------------

def task_to_vector(t: Task) -> np.ndarray:
    """Flatten to ``[xs1, ys1, ..., xq1, yq1, ...]`` with each block x-sorted."""
    if t.support_x.ndim == 2 and t.support_x.shape[1] != 1:
        raise ValueError("task_to_vector handles scalar-input (sine) tasks only")
    sx, sy = _sort_pairs(t.support_x, t.support_y)
    qx, qy = _sort_pairs(t.query_x, t.query_y)
    s = np.stack([sx, sy], axis=1).reshape(-1)
    q = np.stack([qx, qy], axis=1).reshape(-1)
    return np.concatenate([s, q])


def vector_to_task(v, k_support: int, k_query: int, family: str = SINE) -> Task:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if len(v) % 2:
        raise ValueError(f"task vector has odd length {len(v)}")
    if len(v) != 2 * (k_support + k_query):
        raise ValueError(
            f"task vector of length {len(v)} does not hold {k_support}+{k_query} samples"
        )
    pairs = v.reshape(-1, 2)
    s, q = pairs[:k_support], pairs[k_support:]
    return Task(s[:, :1].copy(), s[:, 1:].copy(), q[:, :1].copy(), q[:, 1:].copy(), family)


def tasks_to_matrix(tasks: Sequence[Task]) -> np.ndarray:
    return np.stack([task_to_vector(t) for t in tasks])


@dataclass
class TaskBatch:
    """Tasks of equal shape stacked along a leading axis."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    def __len__(self) -> int:
        return len(self.support_x)

    def take(self, idx) -> "TaskBatch":
        return TaskBatch(self.support_x[idx], self.support_y[idx], self.query_x[idx], self.query_y[idx])

    @classmethod
    def stack(cls, tasks: Sequence[Task]) -> "TaskBatch":
        if not tasks:
            raise ValueError("cannot stack an empty task list")
        return cls(
            np.stack([t.support_x for t in tasks]),
            np.stack([t.support_y for t in tasks]),
            np.stack([t.query_x for t in tasks]),
            np.stack([t.query_y for t in tasks]),
        )

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, k_support: int, k_query: int) -> "TaskBatch":
        vectors = np.asarray(vectors, dtype=np.float64)
        pairs = vectors.reshape(len(vectors), k_support + k_query, 2)
        return cls(
            pairs[:, :k_support, :1].copy(),
            pairs[:, :k_support, 1:].copy(),
            pairs[:, k_support:, :1].copy(),
            pairs[:, k_support:, 1:].copy(),
        )

    def tasks(self) -> list[Task]:
        return [
            Task(self.support_x[i], self.support_y[i], self.query_x[i], self.query_y[i])
            for i in range(len(self))
        ]


# ---------------------------------------------------------------------------
# line-oriented task text format
# ---------------------------------------------------------------------------
# One task per line: "<K^s> <K^q> v_1 ... v_2(K^s+K^q)", whitespace separated,
# values in repr() form so float64 round-trips exactly. Lines starting with
# '#' and blank lines are ignored.

def format_task_line(t: Task) -> str:
    v = task_to_vector(t)
    return " ".join([str(t.k_support), str(t.k_query)] + [repr(float(x)) for x in v])


def parse_task_line(line: str) -> Task:
    parts = line.split()
    if len(parts) < 2:
        raise ValueError(f"malformed task line: {line!r}")
    ks, kq = int(parts[0]), int(parts[1])
    return vector_to_task(np.array([float(p) for p in parts[2:]]), ks, kq)


def write_tasks(path: str | Path, tasks: Iterable[Task], header: str | None = None) -> None:
    with open(path, "w") as fh:
        if header:
            for h in header.splitlines():
                fh.write(f"# {h}\n")
        for t in tasks:
            fh.write(format_task_line(t) + "\n")


def read_tasks(path: str | Path) -> list[Task]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(parse_task_line(line))
    return out


# ---------------------------------------------------------------------------
# synthetic classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPool:
    """Gaussian blobs sharing one isotropic standard deviation."""

    means: np.ndarray
    std: float

    @property
    def n_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, cls: int, n: int) -> np.ndarray:
        noise = rng.standard_normal((n, self.dim)) * self.std
        return self.means[cls] + noise


def make_class_pools(
    rng: np.random.Generator,
    n_base: int = 12,
    n_novel: int = 20,
    dim: int = 16,
    std: float = 1.0,
    spread: float = 1.0,
) -> tuple[ClassPool, ClassPool]:
    """Disjoint meta-train (base) and meta-test (novel) class pools."""
    means = rng.standard_normal((n_base + n_novel, dim)) * spread
    return ClassPool(means[:n_base], std), ClassPool(means[n_base:], std)


def sample_synth_class_task(
    rng: np.random.Generator,
    n_way: int,
    k_support: int,
    k_query: int,
    pool: ClassPool,
) -> Task:
    """N-way task; samples are class-sorted and labelled 0..n_way-1."""
    if pool.n_classes < n_way:
        raise ValueError(f"class pool has {pool.n_classes} classes, need {n_way}")
    classes = rng.choice(pool.n_classes, size=n_way, replace=False)
    sx, qx = [], []
    for c in classes:
        xs = pool.sample(rng, int(c), k_support + k_query)
        sx.append(xs[:k_support])
        qx.append(xs[k_support:])
    labels = np.arange(n_way)
    return Task(
        np.concatenate(sx),
        np.repeat(labels, k_support),
        np.concatenate(qx),
        np.repeat(labels, k_query),
        SYNTH_CLASS,
        None,
        tuple(int(c) for c in classes),
    )
