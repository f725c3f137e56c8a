"""Experiment runner: configs, runs with checkpoints, sweeps and plot data.

Config files are flat ``key = value`` text (``#`` starts a comment). Results
files are comma-separated with the header in :data:`RESULT_FIELDS`.

A run directory ``<out_dir>/<digest>-s<seed>/`` holds:

* ``config.txt``        the full config;
* ``checkpoint.ckpt``   periodic training state (see :mod:`atu.checkpoint`);
* ``results.csv``       result rows;
* ``run.json``          completion marker with the code fingerprint;
* ``loss_curve.csv``    per-iteration meta loss (and up-sampler terms);
* ``generated_tasks.txt`` last up-sampled task set (task text format);
* ``adaptation_curve.csv`` predictions before/after adaptation on the query grid.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import checkpoint as ck
from .meta import adapted_predictions, evaluate
from .tasks import domain_ranges, query_grid, read_tasks, sample_meta_test_set, vector_to_task, write_tasks

RESULT_FIELDS = ("digest", "metric", "mean", "half_width", "n", "wall_seconds", "seed")
TRACKS = ("regression", "synth-class")
LEARNERS = ("maml", "metasgd")
AUGMENTS = ("none", "tu", "atu", "random-per-image", "random-per-class", "nearest-per-class")
PLOT_KINDS = ("generated-tasks", "adaptation-curve", "loss-curve")

# keys that do not change what is computed
_NON_DIGEST = {"seed", "out_dir", "checkpoint_every"}


@dataclass
class ExperimentConfig:
    track: str = "regression"
    learner: str = "maml"
    augment: str = "none"
    seed: int = 0
    out_dir: str = "runs"
    # regression
    k: int = 10
    eval_k: int = 0  # 0: evaluate at the training K
    domain: str = "default"
    alpha: float = 0.01
    meta_lr: float = 1e-3
    batch_size: int = 4
    outer_iters: int = 3750
    eta1: float = 8e-3
    eta2: float = 4e-3
    eta3: float = 0.3
    r_c: int = 2
    r_d: int = 4
    n_ground_truth: int = 64
    max_iters: int = 3750
    aug_ratio: float = 0.2
    up_lr: float = 1e-3
    up_bounded: bool = True
    n_test_tasks: int = 100
    n_query: int = 100
    checkpoint_every: int = 250
    # synthetic classification
    cls_n_way: int = 5
    cls_k_support: int = 1
    cls_k_query: int = 15
    cls_iters: int = 2000
    cls_inner_steps: int = 5
    cls_eta: float = 3.0
    cls_r: int = 2
    cls_k_bank: int = 3
    cls_beta1: float = 2.0
    cls_beta2: float = 2.0
    cls_n_base: int = 12
    cls_n_novel: int = 20
    cls_dim: int = 16
    cls_spread: float = 0.75
    cls_std: float = 1.0
    cls_pool_seed: int = 0
    cls_test_tasks: int = 600

    def validate(self) -> None:
        if self.track not in TRACKS:
            raise ValueError(f"track must be one of {TRACKS}, got {self.track!r}")
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        if self.augment not in AUGMENTS:
            raise ValueError(f"augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.track == "regression" and self.augment not in ("none", "tu", "atu"):
            raise ValueError(f"augment {self.augment!r} is only defined for the synth-class track")
        if self.k < 1 or self.eval_k < 0 or self.batch_size < 1 or self.outer_iters < 0:
            raise ValueError("k, batch_size must be positive and eval_k, outer_iters non-negative")
        if not 0.0 <= self.aug_ratio <= 1.0:
            raise ValueError(f"aug_ratio must lie in [0, 1], got {self.aug_ratio}")
        domain_ranges(self.domain)
        self.atu_config().validate()
        if self.n_ground_truth % self.batch_size:
            raise ValueError("n_ground_truth must be a multiple of batch_size")
        if self.track == "synth-class":
            self.class_config().validate()
            if self.cls_n_base < self.cls_n_way + self.cls_k_bank:
                raise ValueError("base pool too small for n_way classes plus the memory bank")

    def atu_config(self):
        from .upsampler import AtuConfig

        adversarial = self.augment == "atu"
        return AtuConfig(
            eta1=self.eta1 if adversarial else 0.0,
            eta2=self.eta2 if adversarial else 0.0,
            eta3=self.eta3,
            r_c=self.r_c,
            r_d=self.r_d,
            n_ground_truth=self.n_ground_truth,
            max_iters=self.max_iters,
            aug_ratio=self.aug_ratio if self.augment in ("tu", "atu") else 0.0,
            lr=self.up_lr,
            bounded=self.up_bounded,
        )

    def class_config(self):
        from .classify import ClassAtuConfig

        return ClassAtuConfig(
            n_way=self.cls_n_way,
            k_support=self.cls_k_support,
            k_query=self.cls_k_query,
            beta=(self.cls_beta1, self.cls_beta2),
            r=self.cls_r,
            k_bank=self.cls_k_bank,
            eta=self.cls_eta,
            inner_steps=self.cls_inner_steps,
            inner_lr=self.alpha,
            meta_lr=self.meta_lr,
            up_lr=self.up_lr,
            batch_size=self.batch_size,
            iters=self.cls_iters,
        )

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        body = "".join(
            f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self) if f.name not in _NON_DIGEST
        )
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def with_values(self, **kv) -> "ExperimentConfig":
        return replace(self, **{k: coerce(k, v) for k, v in kv.items()})


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
ALIASES = {"augmentation-ratio": "aug_ratio", "ratio": "aug_ratio", "K": "k", "shots": "k"}


def field_name(key: str) -> str:
    key = ALIASES.get(key, key)
    name = key.replace("-", "_")
    if name not in _FIELD_TYPES:
        raise ValueError(f"unknown config key {key!r}")
    return name


def coerce(key: str, value):
    name = field_name(key)
    t = _FIELD_TYPES[name]
    if t in ("int", int):
        if isinstance(value, str):
            value = float(value) if any(c in value for c in ".eE") else int(value)
        if float(value) != int(value):
            raise ValueError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if t in ("float", float):
        return float(value)
    if t in ("bool", bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{name} must be true or false, got {value!r}")
            return low in ("true", "1", "yes")
        return bool(value)
    return str(value)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    kv = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {i}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[field_name(k)] = v
    return (base or ExperimentConfig()).with_values(**kv)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), base)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _presets() -> dict[str, dict[str, Any]]:
    p: dict[str, dict[str, Any]] = {}
    for learner in LEARNERS:
        for aug in ("none", "tu", "atu"):
            # MAML rows carry the bare augmentation name ("table2-atu-10shot")
            name = {"none": learner, "tu": "tu", "atu": "atu"}[aug]
            if learner != "maml" and aug != "none":
                name = f"{learner}-{aug}"
            for k in (10, 20, 30):
                p[f"table2-{name}-{k}shot"] = {
                    "learner": learner,
                    "augment": aug,
                    "k": k,
                }
            for dom in ("frequency", "amplitude", "phase"):
                p[f"table3-{name}-{dom}"] = {"learner": learner, "augment": aug, "k": 10, "domain": dom}
    for ratio in (0.0, 0.2, 0.4, 0.6):
        p[f"table8-ratio-{ratio:g}"] = {"augment": "tu", "k": 10, "aug_ratio": ratio}
    for aug in AUGMENTS:
        p[f"synth-class-{aug}"] = {"track": "synth-class", "augment": aug}
    return p


PRESETS = _presets()


def preset(name: str) -> ExperimentConfig:
    try:
        kv = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}") from None
    return ExperimentConfig().with_values(**kv)


# ---------------------------------------------------------------------------
# results and fingerprints
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    digest: str
    metric: str
    mean: float
    half_width: float
    n: int
    wall_seconds: float
    seed: int

    def as_list(self) -> list:
        return [self.digest, self.metric, repr(self.mean), repr(self.half_width), self.n, f"{self.wall_seconds:.3f}", self.seed]


def write_results(path: str | Path, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow(r.as_list())


def read_results(path: str | Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != RESULT_FIELDS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            ResultRow(r[0], r[1], float(r[2]), float(r[3]), int(r[4]), float(r[5]), int(r[6])) for r in rd
        ]


def code_fingerprint() -> str:
    """Hash of the package sources; cached runs are reused only when it matches."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / f"{cfg.digest()}-s{cfg.seed}"


def test_seed(cfg: ExperimentConfig) -> np.random.SeedSequence:
    """Meta-test tasks depend on the seed only, so methods are compared on the same tasks."""
    return np.random.SeedSequence([cfg.seed, 0x7E57])


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def run(cfg: ExperimentConfig, reuse: bool = True, stop_after: int | None = None) -> list[ResultRow]:
    """Train and evaluate one config; resumes from a checkpoint if one exists.

    With ``reuse`` a completed run directory whose code fingerprint matches is
    read back instead of recomputed. ``stop_after`` halts after that many
    outer iterations (leaving a checkpoint) and returns no rows.
    """
    cfg.validate()
    d = run_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    marker = d / "run.json"
    if reuse and marker.exists():
        info = json.loads(marker.read_text())
        if info.get("fingerprint") == code_fingerprint() and (d / "results.csv").exists():
            return read_results(d / "results.csv")
    (d / "config.txt").write_text(cfg.to_text())
    if cfg.track == "regression":
        rows = _run_regression(cfg, d, stop_after)
    else:
        rows = _run_class(cfg, d, stop_after)
    if not rows:
        return rows
    write_results(d / "results.csv", rows)
    marker.write_text(json.dumps({"fingerprint": code_fingerprint(), "digest": cfg.digest(), "seed": cfg.seed}))
    # read back so fresh and cached calls return identical rows
    return read_results(d / "results.csv")


def _elapsed(meta: dict, t0: float) -> float:
    return float(meta.get("wall_seconds", 0.0)) + time.time() - t0


def _ck_meta(cfg: ExperimentConfig, prior: dict, t0: float) -> dict:
    return {"digest": cfg.digest(), "fingerprint": code_fingerprint(), "wall_seconds": _elapsed(prior, t0)}


def _run_regression(cfg: ExperimentConfig, d: Path, stop_after: int | None) -> list[ResultRow]:
    from .upsampler import atu_meta_train, load_regression_run, new_regression_run, save_regression_run

    t0 = time.time()
    acfg = cfg.atu_config()
    ck_path = d / "checkpoint.ckpt"
    prior: dict = {}
    state = None
    if ck_path.exists():
        state, prior = load_regression_run(ck_path)
        if prior.get("digest") != cfg.digest():
            raise ValueError(f"{ck_path} belongs to a different config")
        if prior.get("fingerprint") != code_fingerprint():
            # trained by other code: start over rather than mix versions
            state, prior = None, {}
    if state is None:
        state = new_regression_run(
            cfg.seed,
            acfg,
            k=cfg.k,
            with_upsampler=cfg.augment in ("tu", "atu"),
            metasgd=cfg.learner == "metasgd",
            alpha=cfg.alpha,
            meta_lr=cfg.meta_lr,
        )

    def save():
        save_regression_run(ck_path, state, _ck_meta(cfg, prior, t0))

    def on_iteration(s):
        if cfg.checkpoint_every and s.iteration % cfg.checkpoint_every == 0:
            save()

    atu_meta_train(
        state, acfg, cfg.outer_iters, cfg.k, cfg.batch_size, stop_after=stop_after, on_iteration=on_iteration
    )
    save()
    if state.iteration < cfg.outer_iters:
        return []

    _write_loss_curve(d / "loss_curve.csv", state.meta_losses, state.up_history)
    if state.last_generated is not None:
        write_tasks(
            d / "generated_tasks.txt",
            [vector_to_task(v, cfg.k, cfg.k) for v in state.last_generated],
            f"up-sampled tasks after outer iteration {state.iteration}",
        )
    k_eval = cfg.eval_k or cfg.k
    test = sample_meta_test_set(
        np.random.default_rng(test_seed(cfg)), domain_ranges(cfg.domain), k_eval, cfg.n_test_tasks, cfg.n_query
    )
    report = evaluate(state.model, test, k_eval)
    _write_adaptation_curve(d / "adaptation_curve.csv", state.model, test[:5], k_eval)
    wall = _elapsed(prior, t0)
    return [ResultRow(cfg.digest(), "mse", report.mean, report.half_width, report.n, wall, cfg.seed)]


def _write_loss_curve(path: Path, meta_losses, up_history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "meta_loss", "up_emd", "up_sq_emd", "up_adv", "up_loss"])
        for i, loss in enumerate(meta_losses):
            h = up_history[i] if i < len(up_history) else {}
            w.writerow([i, repr(loss)] + [repr(h[k]) if k in h else "" for k in ("emd", "sq_emd", "adv", "loss")])


def _write_adaptation_curve(path: Path, model, tasks, k: int, n_grid: int = 100) -> None:
    grid = query_grid(n_grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "x", "target", "pre", "post"])
        for i, t in enumerate(tasks):
            pre, post = adapted_predictions(model, t, grid, k)
            target = t.params(grid) if t.params is not None else np.full_like(grid, np.nan)
            for x, y, a, b in zip(grid, target, pre, post):
                w.writerow([i, repr(float(x)), repr(float(y)), repr(float(a)), repr(float(b))])


def _run_class(cfg: ExperimentConfig, d: Path, stop_after: int | None) -> list[ResultRow]:
    from .classify import accuracy_report, class_atu_train, load_class_run, new_class_run, save_class_run
    from .classify import sample_class_test_set
    from .tasks import make_class_pools

    t0 = time.time()
    ccfg = cfg.class_config()
    base, novel = make_class_pools(
        np.random.default_rng(cfg.cls_pool_seed),
        cfg.cls_n_base,
        cfg.cls_n_novel,
        cfg.cls_dim,
        cfg.cls_std,
        cfg.cls_spread,
    )
    ck_path = d / "checkpoint.ckpt"
    prior: dict = {}
    state = None
    if ck_path.exists():
        state, prior = load_class_run(ck_path)
        if prior.get("digest") != cfg.digest():
            raise ValueError(f"{ck_path} belongs to a different config")
        if prior.get("fingerprint") != code_fingerprint():
            # trained by other code: start over rather than mix versions
            state, prior = None, {}
    if state is None:
        state = new_class_run(cfg.seed, ccfg, cfg.cls_dim, cfg.augment, metasgd=cfg.learner == "metasgd")
    target = cfg.cls_iters if stop_after is None else min(cfg.cls_iters, state.iteration + stop_after)
    every = cfg.checkpoint_every or target
    while state.iteration < target:
        class_atu_train(state, base, ccfg, min(target, (state.iteration // every + 1) * every))
        save_class_run(ck_path, state, _ck_meta(cfg, prior, t0))
    if state.iteration < cfg.cls_iters:
        return []
    _write_loss_curve(d / "loss_curve.csv", state.meta_losses, state.up_history)
    test = sample_class_test_set(np.random.default_rng(test_seed(cfg)), novel, ccfg, cfg.cls_test_tasks)
    rep = accuracy_report(state.model, test, ccfg.inner_steps)
    return [ResultRow(cfg.digest(), "accuracy", rep.mean, rep.half_width, rep.n, _elapsed(prior, t0), cfg.seed)]


def evaluate_run(cfg: ExperimentConfig, domain: str | None = None, k: int | None = None) -> ResultRow:
    """Re-evaluate a finished regression run on another domain preset or K (adapt-only mode)."""
    from .upsampler import load_regression_run

    if cfg.track != "regression":
        raise ValueError("evaluate_run handles the regression track")
    ck_path = run_dir(cfg) / "checkpoint.ckpt"
    if not ck_path.exists():
        raise FileNotFoundError(f"no checkpoint at {ck_path}; train first")
    state, _ = load_regression_run(ck_path)
    if state.iteration < cfg.outer_iters:
        raise ValueError(f"run stopped at iteration {state.iteration} of {cfg.outer_iters}")
    t0 = time.time()
    domain = domain or cfg.domain
    k = k or cfg.eval_k or cfg.k
    test = sample_meta_test_set(
        np.random.default_rng(test_seed(cfg)), domain_ranges(domain), k, cfg.n_test_tasks, cfg.n_query
    )
    rep = evaluate(state.model, test, k)
    return ResultRow(cfg.digest(), f"mse[{domain},k={k}]", rep.mean, rep.half_width, rep.n, time.time() - t0, cfg.seed)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def sweep(
    base: ExperimentConfig,
    axis: str,
    values: list,
    results_path: str | Path | None = None,
    jobs: int = 1,
    reuse: bool = True,
) -> list[ResultRow]:
    """One run per value of ``axis``; every run keeps ``base.seed``."""
    if not values:
        raise ValueError("sweep needs at least one value")
    name = field_name(axis)
    if name in _NON_DIGEST and name != "seed":
        raise ValueError(f"{axis!r} does not change the computation")
    cfgs = [base.with_values(**{name: v}) for v in values]
    for c in cfgs:
        c.validate()
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(run, cfgs, [reuse] * len(cfgs)))
    else:
        parts = [run(c, reuse) for c in cfgs]
    rows = [r for p in parts for r in p]
    if results_path is not None:
        write_results(results_path, rows)
    return rows


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def emit_plot_data(run_path: str | Path, kind: str, out: str | Path) -> Path:
    """Write plotting columns for a finished run directory and return the file path."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"kind must be one of {PLOT_KINDS}, got {kind!r}")
    d = Path(run_path)
    out = Path(out)
    if kind == "generated-tasks":
        src = d / "generated_tasks.txt"
        if not src.exists():
            raise FileNotFoundError(f"{src} missing (only runs with an up-sampler dump generated tasks)")
        tasks = read_tasks(src)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "set", "x", "y"])
            for i, t in enumerate(tasks):
                for name, xs, ys in (("support", t.support_x, t.support_y), ("query", t.query_x, t.query_y)):
                    for x, y in zip(np.ravel(xs), np.ravel(ys)):
                        w.writerow([i, name, repr(float(x)), repr(float(y))])
        return out
    src = d / ("adaptation_curve.csv" if kind == "adaptation-curve" else "loss_curve.csv")
    if not src.exists():
        raise FileNotFoundError(f"{src} missing; is the run finished?")
    out.write_bytes(src.read_bytes())
    return out
