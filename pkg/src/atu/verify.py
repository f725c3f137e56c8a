"""Oracle and property suites, runnable from the command line (``atu verify``).

Each check compares the implementation against an independent reference
(exhaustive enumeration, central finite differences, closed forms) and
returns a :class:`CheckResult`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .emd import emd_sets, solve_assignment

FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def brute_force_assignment(cost: np.ndarray) -> float:
    n = len(cost)
    rows = np.arange(n)
    return min(float(cost[rows, list(p)].sum()) for p in itertools.permutations(range(n)))


def check_assignment(n_trials: int = 1000, max_n: int = 6, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_trials):
        n = int(rng.integers(1, max_n + 1))
        c = rng.random((n, n)) * 10.0
        got = solve_assignment(c)
        if float(c[np.arange(n), got.permutation].sum()) != brute_force_assignment(c):
            bad += 1
    return CheckResult(
        "assignment vs exhaustive enumeration",
        bad == 0,
        f"{n_trials - bad}/{n_trials} random matrices (n <= {max_n}) matched exactly",
    )


def check_emd_metric(n_trials: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_sym = worst_tri = worst_self = 0.0
    for _ in range(n_trials):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        a, b, c = (rng.normal(size=(n, d)) for _ in range(3))
        ab, ba = emd_sets(a, b)[0], emd_sets(b, a)[0]
        worst_self = max(worst_self, emd_sets(a, a)[0])
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_tri = max(worst_tri, emd_sets(a, c)[0] - ab - emd_sets(b, c)[0])
    ok = worst_self == 0.0 and worst_sym <= 1e-12 and worst_tri <= 1e-9
    return CheckResult(
        "EMD metric axioms",
        ok,
        f"max d(a,a)={worst_self:.1e}, max |d(a,b)-d(b,a)|={worst_sym:.1e}, max triangle excess={worst_tri:.1e}",
    )


# ---------------------------------------------------------------------------
# autodiff
# ---------------------------------------------------------------------------

def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of a scalar function of several arrays."""
    out = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x)
        for j in np.ndindex(x.shape):
            orig = x[j]
            x[j] = orig + h
            fp = f(xs)
            x[j] = orig - h
            fm = f(xs)
            x[j] = orig
            g[j] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per primitive: (function of Tensors -> Tensor, inputs)."""
    s = (3, 4)
    idx = rng.integers(0, 3, size=5)
    return {
        "add": (lambda a, b: a + b, [rng.normal(size=s), rng.normal(size=(4,))]),
        "sub": (lambda a, b: a - b, [rng.normal(size=s), rng.normal(size=s)]),
        "mul": (lambda a, b: a * b, [rng.normal(size=s), rng.normal(size=(3, 1))]),
        "div": (lambda a, b: a / b, [rng.normal(size=s), _away_from_zero(rng, s)]),
        "neg": (lambda a: -a, [rng.normal(size=s)]),
        "power": (lambda a: ad.power(a, 3.0), [rng.normal(size=s)]),
        "exp": (ad.exp, [rng.normal(size=s)]),
        "log": (ad.log, [rng.uniform(0.5, 3.0, size=s)]),
        "sin": (ad.sin, [rng.normal(size=s)]),
        "cos": (ad.cos, [rng.normal(size=s)]),
        "sqrt": (ad.sqrt, [rng.uniform(0.5, 3.0, size=s)]),
        "relu": (ad.relu, [_away_from_zero(rng, s, 0.05)]),
        "clip": (lambda a: ad.clip(a, -0.5, 0.5), [(rng.uniform(0.0, 0.4, s) + rng.choice([0.05, 0.6], size=s)) * rng.choice([-1.0, 1.0], size=s)]),
        "matmul": (lambda a, b: a @ b, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]),
        "reduce-sum": (lambda a: ad.reduce_sum(a, axis=1), [rng.normal(size=s)]),
        "mean": (lambda a: ad.mean(a, axis=0), [rng.normal(size=s)]),
        "max": (lambda a: ad.amax(a, axis=1), [rng.permutation(12).reshape(s) + rng.uniform(0, 0.5, s)]),
        "reshape": (lambda a: ad.reshape(a, (2, 6)), [rng.normal(size=s)]),
        "swapaxes": (lambda a: ad.swapaxes(a, 0, 1), [rng.normal(size=s)]),
        "broadcast": (lambda a: ad.broadcast_to(a, (2, 3, 4)), [rng.normal(size=(3, 1))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=0), [rng.normal(size=s), rng.normal(size=(2, 4))]),
        "slice": (lambda a: a[1:, ::2], [rng.normal(size=s)]),
        "take": (lambda a: ad.take(a, idx), [rng.normal(size=s)]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [rng.normal(size=s)]),
        "log-softmax": (lambda a: ad.log_softmax(a, axis=-1), [rng.normal(size=s)]),
        "norm": (lambda a: ad.norm(a, axis=-1), [rng.normal(size=s)]),
    }


def primitive_fd_error(name: str, rng: np.random.Generator) -> float:
    fn, xs = primitive_cases(rng)[name]
    out_shape = fn(*[Tensor(x) for x in xs]).shape
    w = rng.normal(size=out_shape)

    def scalar(arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * w))

    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    loss = ad.reduce_sum(fn(*ts) * w)
    analytic = [g.data for g in ad.grad(loss, ts)]
    numeric = numeric_grad(scalar, [x.copy() for x in xs])
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def _kink_margin(params: dict[str, np.ndarray], x: np.ndarray, n_layers: int) -> float:
    """Smallest |pre-activation| over the hidden ReLU layers (batched params)."""
    h, low = x, np.inf
    for i in range(n_layers - 1):
        z = h @ params[f"w{i}"] + params[f"b{i}"][..., None, :]
        low = min(low, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)
    return low


def maml_objective_case(rng: np.random.Generator, hidden: int = 8, margin: float = 1e-3):
    """A small one-step MAML problem: (model, batch).

    Instances with a hidden pre-activation within ``margin`` of a ReLU kink,
    on the support set at theta or on the query set at the adapted
    parameters, are redrawn: central differences straddle the kink there.
    """
    from .meta import init_model, inner_adapt
    from .tasks import TaskBatch, sample_sine_tasks

    while True:
        model = init_model(rng, (1, hidden, hidden, 1), alpha=0.01)
        # Random biases: with zero biases a sample that kills every first-layer
        # unit puts later pre-activations exactly on a ReLU kink.
        for k, p in model.params.items():
            if k.startswith("b"):
                p.data = rng.normal(scale=0.5, size=p.shape)
        batch = TaskBatch.stack(sample_sine_tasks(rng, 2, k_support=5, k_query=5))
        phi = inner_adapt(model, batch.support_x, batch.support_y, 1, False)
        n = model.n_layers
        theta = {k: np.broadcast_to(p.data, (2,) + p.shape) for k, p in model.params.items()}
        at_theta = _kink_margin(theta, batch.support_x, n)
        at_phi = _kink_margin({k: v.data for k, v in phi.items()}, batch.query_x, n)
        if min(at_theta, at_phi) >= margin:
            return model, batch


def maml_fd_error(rng: np.random.Generator, hidden: int = 8) -> float:
    from .meta import inner_adapt, meta_gradients, task_losses

    model, batch = maml_objective_case(rng, hidden)
    _, grads = meta_gradients(model, batch)
    keys = list(model.params)

    def objective(arrs):
        m = model.clone()
        for k, a in zip(keys, arrs):
            m.params[k] = Tensor(a, requires_grad=True)
        phi = inner_adapt(m, batch.support_x, batch.support_y, 1, False)
        with ad.no_grad():
            return float(np.mean(task_losses(phi, batch.query_x, batch.query_y, m).data))

    numeric = numeric_grad(objective, [model.params[k].data.copy() for k in keys])
    analytic = [grads[f"theta/{k}"] for k in keys]
    return rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


def check_autodiff(n_instances: int = 100, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    names = list(primitive_cases(rng))
    worst: dict[str, float] = {}
    for name in names:
        worst[name] = max(primitive_fd_error(name, rng) for _ in range(n_instances))
    worst["maml-meta-gradient"] = max(maml_fd_error(rng) for _ in range(n_instances))
    bad = [k for k, v in worst.items() if not v < tol]
    top = max(worst, key=worst.get)
    return CheckResult(
        "autodiff vs central finite differences",
        not bad,
        f"{len(worst)} primitives x {n_instances} instances; worst {top} rel err {worst[top]:.2e}"
        + (f"; failing: {bad}" if bad else ""),
    )


def check_hvp(n_trials: int = 20, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """grad-of-grad of sin(w.x) against the closed-form Hessian-vector product."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        d = int(rng.integers(2, 7))
        w, x0, v = rng.normal(size=d), rng.normal(size=d), rng.normal(size=d)
        x = Tensor(x0, requires_grad=True)
        f = ad.sin(ad.reduce_sum(x * w))
        (g,) = ad.grad(f, [x], create_graph=True)
        (hv,) = ad.grad(ad.reduce_sum(g * v), [x])
        exact = -np.sin(w @ x0) * w * (w @ v)
        worst = max(worst, rel_error(hv.data, exact))
    return CheckResult("second-order Hessian-vector product", worst < tol, f"worst rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# task-awareness bound
# ---------------------------------------------------------------------------

LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def task_awareness_terms(rng: np.random.Generator, n: int, d_in: int, d_out: int, lam: float):
    """Left side and the two bounds for one random pair of linear tasks.

    Inputs are matched by the optimal assignment; the interpolated task mixes
    matched inputs and outputs with weight ``lam``. The distance is the sum of
    per-sample Euclidean residuals against the interpolated linear map.
    Returns (lhs, stated_bound, tight_bound) with
    ``stated = n^2 lam^2 (1-lam)^2 ||W1-W2||_2 d_EMD`` and
    ``tight = n lam (1-lam) ||W1-W2||_2 d_EMD``.
    """
    w1, w2 = rng.normal(size=(d_out, d_in)), rng.normal(size=(d_out, d_in))
    x1, x2 = rng.normal(size=(n, d_in)), rng.normal(size=(n, d_in))
    d_emd, asg = emd_sets(x1, x2)
    x2m = x2[asg.permutation]
    y1, y2m = x1 @ w1.T, x2m @ w2.T
    xu = (1 - lam) * x1 + lam * x2m
    yu = (1 - lam) * y1 + lam * y2m
    wu = (1 - lam) * w1 + lam * w2
    lhs = float(np.linalg.norm(yu - xu @ wu.T, axis=1).sum())
    spec = float(np.linalg.norm(w1 - w2, 2))
    stated = n * n * lam**2 * (1 - lam) ** 2 * spec * d_emd
    tight = n * lam * (1 - lam) * spec * d_emd
    return lhs, stated, tight


def check_task_awareness(n_pairs: int = 1000, seed: int = 0, min_n: int = 6, max_n: int = 12) -> CheckResult:
    """The stated bound needs ``n lam (1-lam) >= 1``; with the grid's smallest
    interior weight 0.25 that is ``n >= 6``."""
    rng = np.random.default_rng(seed)
    worst_ratio, worst_end = 0.0, 0.0
    for _ in range(n_pairs):
        n = int(rng.integers(min_n, max_n + 1))
        di, do = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        state = rng.bit_generator.state
        for lam in LAMBDA_GRID:
            rng.bit_generator.state = state  # same task pair across the grid
            lhs, stated, _ = task_awareness_terms(rng, n, di, do, lam)
            if lam in (0.0, 1.0):
                worst_end = max(worst_end, lhs)
            elif stated > 0:
                worst_ratio = max(worst_ratio, lhs / stated)
    ok = worst_ratio <= 1.0 and worst_end <= 1e-10
    return CheckResult(
        "task-awareness bound",
        ok,
        f"{n_pairs} pairs x {len(LAMBDA_GRID)} weights, n in [{min_n}, {max_n}]: "
        f"max lhs/bound {worst_ratio:.3f}, max lhs at lam in {{0,1}} {worst_end:.1e}",
    )


# ---------------------------------------------------------------------------
# gradient isolation
# ---------------------------------------------------------------------------

def check_isolation(seed: int = 0) -> CheckResult:
    from .meta import init_model
    from .tasks import sample_sine_tasks, tasks_to_matrix
    from .upsampler import AtuConfig, init_upsampler, sample_noise, upsampler_update

    rng = np.random.default_rng(seed)
    cfg = AtuConfig(coarse_hidden=(64, 64))
    model = init_model(rng, metasgd=True)
    up = init_upsampler(rng, 40, cfg)
    before = model.snapshot()
    gt = tasks_to_matrix(sample_sine_tasks(rng, cfg.n_ground_truth))
    upsampler_update(up, ad.adam(cfg.lr), gt, sample_noise(rng, cfg), model, cfg, 10, 10)
    after = model.snapshot()
    same = all(np.array_equal(before[k], after[k]) for k in before)
    return CheckResult("gradient isolation", same, "theta and inner rates bit-identical across an up-sampler step")


SUITES: dict[str, Callable[..., CheckResult]] = {
    "assignment": check_assignment,
    "emd-metric": check_emd_metric,
    "autodiff": check_autodiff,
    "hvp": check_hvp,
    "task-awareness": check_task_awareness,
    "isolation": check_isolation,
}


def run_all(quick: bool = False, suites=None) -> list[CheckResult]:
    unknown = set(suites or ()) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites {sorted(unknown)}; known: {list(SUITES)}")
    out = []
    for name, fn in SUITES.items():
        if suites and name not in suites:
            continue
        if quick and name == "assignment":
            out.append(fn(n_trials=100))
        elif quick and name == "autodiff":
            out.append(fn(n_instances=5))
        elif quick and name == "task-awareness":
            out.append(fn(n_pairs=100))
        else:
            out.append(fn())
    return out
