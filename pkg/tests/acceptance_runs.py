"""Experiment definitions behind the acceptance suite.

Run as a script to train everything into the cache before ``pytest``:

    python3 tests/acceptance_runs.py [--only regression|class]
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np

from atu import autodiff as ad
from atu import harness as H
from atu.tasks import sample_sine_tasks, tasks_to_matrix
from atu.upsampler import build_patch, generated_fit_residual, load_regression_run, sample_noise, upsample_vectors

OUT = os.environ.get("ATU_ACCEPTANCE_DIR", str(Path(__file__).resolve().parent.parent / "acceptance_runs"))
SEEDS = (0, 1, 2)
CLASS_SEEDS = (0, 1, 2, 3, 4)
DOMAINS = ("frequency", "amplitude", "phase")


def config(kind: str, seed: int, ratio: float | None = None, eta3: float | None = None) -> H.ExperimentConfig:
    name = {"maml": "table2-maml-10shot", "tu": "table2-tu-10shot", "atu": "table2-atu-10shot"}[kind]
    cfg = H.preset(name).with_values(out_dir=OUT, seed=seed)
    if ratio is not None:
        cfg = cfg.with_values(aug_ratio=ratio)
    if eta3 is not None:
        cfg = cfg.with_values(eta3=eta3)
    return cfg


def class_config(aug: str, seed: int) -> H.ExperimentConfig:
    return H.preset(f"synth-class-{aug}").with_values(out_dir=OUT, seed=seed)


@lru_cache(maxsize=None)
def regression_results(kind: str, ratio: float | None = None, eta3: float | None = None):
    return [H.run(config(kind, s, ratio, eta3))[0] for s in SEEDS]


@lru_cache(maxsize=None)
def class_results(aug: str):
    return [H.run(class_config(aug, s))[0] for s in CLASS_SEEDS]


def cross_domain() -> dict[str, tuple[float, float]]:
    """Mean MSE over seeds of the 10-shot ATU and MAML models on each shifted domain."""
    regression_results("maml")
    regression_results("atu")
    out = {}
    for d in DOMAINS:
        atu = np.mean([H.evaluate_run(config("atu", s), d).mean for s in SEEDS])
        maml = np.mean([H.evaluate_run(config("maml", s), d).mean for s in SEEDS])
        out[d] = (float(atu), float(maml))
    return out


def _residual(cfg: H.ExperimentConfig, n_sets: int = 10) -> float:
    """Fit residual of tasks generated by the final up-sampler from fixed ground-truth sets."""
    run, _ = load_regression_run(H.run_dir(cfg) / "checkpoint.ckpt")
    acfg = cfg.atu_config()
    rng = np.random.default_rng([cfg.seed, 9])
    vals = []
    for _ in range(n_sets):
        gt = tasks_to_matrix(sample_sine_tasks(rng, acfg.n_ground_truth, k_support=cfg.k, k_query=cfg.k))
        noise = sample_noise(rng, acfg)
        with ad.no_grad():
            gen = upsample_vectors(run.upsampler, gt[build_patch(gt, run.upsampler.n_patch)], noise).data
        vals.append(generated_fit_residual(gen, cfg.k, cfg.k))
    return float(np.mean(vals))


def coherence_residuals() -> tuple[list[float], list[float]]:
    regression_results("atu")
    regression_results("atu", eta3=0.0)
    with_term = [_residual(config("atu", s)) for s in SEEDS]
    without = [_residual(config("atu", s, eta3=0.0)) for s in SEEDS]
    return with_term, without


def main(argv=None) -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", choices=("regression", "class"))
    args = ap.parse_args(argv)
    jobs = []
    if args.only != "class":
        jobs += [("maml", None, None), ("atu", None, None), ("tu", None, None), ("atu", None, 0.0)]
        jobs += [("tu", 0.4, None), ("tu", 0.6, None)]
    t0 = time.time()
    for kind, ratio, eta3 in jobs:
        for s in SEEDS:
            cfg = config(kind, s, ratio, eta3)
            row = H.run(cfg)[0]
            print(f"{time.time() - t0:8.0f}s {cfg.augment} ratio={cfg.atu_config().aug_ratio} eta3={cfg.eta3} seed={s}: {row.mean:.4f} ± {row.half_width:.4f}", flush=True)
    if args.only != "regression":
        for s in CLASS_SEEDS:
            for aug in ("none", "atu"):
                row = H.run(class_config(aug, s))[0]
                print(f"{time.time() - t0:8.0f}s class {aug} seed={s}: {row.mean:.4f} ± {row.half_width:.4f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
