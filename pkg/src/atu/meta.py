"""Gradient-based meta-learners: one-step MAML and MetaSGD.

Tasks in a meta-batch are processed together: the initialization is broadcast
to a leading task axis, so each task gets its own adapted parameters inside a
single graph and the outer gradient sums back over that axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, broadcast_to, grad, log_softmax, reduce_sum
from .layers import init_dense, mlp
from .tasks import Task, TaskBatch

REGRESSION_ARCH = (1, 40, 40, 1)


@dataclass
class MetaModel:
    """Initialization of the base network plus the inner-loop rates.

    MAML uses the scalar ``alpha``; MetaSGD learns one rate per parameter
    entry (``inner_rates``), initialised to ``alpha``.
    """

    params: dict[str, Tensor]
    alpha: float = 0.01
    inner_rates: dict[str, Tensor] | None = None
    arch: tuple[int, ...] = REGRESSION_ARCH
    loss: str = "mse"

    @property
    def metasgd(self) -> bool:
        return self.inner_rates is not None

    @property
    def n_layers(self) -> int:
        return len(self.arch) - 1

    def trainable(self) -> dict[str, Tensor]:
        out = {f"theta/{k}": p for k, p in self.params.items()}
        if self.inner_rates is not None:
            out.update({f"rate/{k}": r for k, r in self.inner_rates.items()})
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.trainable().items()}

    def clone(self) -> "MetaModel":
        rates = None
        if self.inner_rates is not None:
            rates = {k: Tensor(r.data.copy(), requires_grad=True) for k, r in self.inner_rates.items()}
        return MetaModel(
            {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()},
            self.alpha,
            rates,
            self.arch,
            self.loss,
        )


def init_model(
    rng: np.random.Generator,
    arch: tuple[int, ...] = REGRESSION_ARCH,
    alpha: float = 0.01,
    metasgd: bool = False,
    loss: str = "mse",
) -> MetaModel:
    if loss not in ("mse", "ce"):
        raise ValueError(f"loss must be 'mse' or 'ce', got {loss!r}")
    params = {}
    for i, (fi, fo) in enumerate(zip(arch[:-1], arch[1:])):
        w, b = init_dense(rng, fi, fo)
        params[f"w{i}"] = Tensor(w, requires_grad=True)
        params[f"b{i}"] = Tensor(b, requires_grad=True)
    rates = None
    if metasgd:
        rates = {k: Tensor(np.full(p.shape, alpha), requires_grad=True) for k, p in params.items()}
    return MetaModel(params, alpha, rates, tuple(arch), loss)


def predict(params: dict[str, Tensor], x, n_layers: int) -> Tensor:
    layers = [(params[f"w{i}"], params[f"b{i}"]) for i in range(n_layers)]
    return mlp(x if isinstance(x, Tensor) else Tensor(x), layers)


def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(n_classes)[labels]


def task_losses(params: dict[str, Tensor], x, y, model: MetaModel) -> Tensor:
    """Per-task loss, shape ``(B,)``: mean squared error or cross-entropy."""
    pred = predict(params, x, model.n_layers)
    if model.loss == "mse":
        diff = pred - y
        return ad.mean(diff * diff, axis=(1, 2))
    y_arr = y.data if isinstance(y, Tensor) else y
    onehot = _onehot(y_arr, model.arch[-1])
    nll = -reduce_sum(log_softmax(pred, axis=-1) * onehot, axis=-1)
    return ad.mean(nll, axis=1)


def _batched(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x


def _rates(model: MetaModel, detach: bool = False) -> dict[str, Tensor | float]:
    if model.inner_rates is None:
        return {k: model.alpha for k in model.params}
    if detach:
        return {k: Tensor(r.data) for k, r in model.inner_rates.items()}
    return dict(model.inner_rates)


def _adapt(
    phi: dict[str, Tensor],
    x,
    y,
    model: MetaModel,
    rates: dict,
    steps: int,
    create_graph: bool,
    first_grads: list[Tensor] | None = None,
) -> dict[str, Tensor]:
    keys = list(phi)
    for s in range(steps):
        if s == 0 and first_grads is not None:
            gs = first_grads
        else:
            loss = reduce_sum(task_losses(phi, x, y, model))
            gs = grad(loss, [phi[k] for k in keys], create_graph=create_graph)
        phi = {k: phi[k] - rates[k] * g for k, g in zip(keys, gs)}
    return phi


def _check_support(support_x) -> None:
    arr = support_x.data if isinstance(support_x, Tensor) else np.asarray(support_x)
    if arr.ndim < 3 or arr.shape[1] == 0:
        raise ValueError("support set is empty")


def inner_adapt(
    model: MetaModel,
    support_x,
    support_y,
    steps: int = 1,
    create_graph: bool = True,
    base: dict[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """Per-task adapted parameters after ``steps`` gradient steps.

    ``support_x`` is ``(B, K, d)``; a single task ``(K, d)`` is promoted to
    ``B = 1``. The result carries the task axis first.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not ad.is_grad_enabled():
        raise RuntimeError("inner_adapt needs gradients; call it outside no_grad()")
    sx = _batched(support_x)
    sy = support_y
    if sx.ndim == 2:
        sx = ad.reshape(sx, (1,) + sx.shape)
        sy = sy[None] if not isinstance(sy, Tensor) else ad.reshape(sy, (1,) + sy.shape)
    _check_support(sx)
    base = model.params if base is None else base
    n_tasks = sx.shape[0]
    phi = {k: broadcast_to(p, (n_tasks,) + p.shape) for k, p in base.items()}
    return _adapt(phi, sx, sy, model, _rates(model), steps, create_graph)


def meta_gradients(
    model: MetaModel,
    batch: TaskBatch,
    steps: int = 1,
    create_graph: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean post-adaptation query loss and its gradient w.r.t. trainables."""
    trainable = model.trainable()
    phi = inner_adapt(model, batch.support_x, batch.support_y, steps, create_graph)
    loss = ad.mean(task_losses(phi, batch.query_x, batch.query_y, model))
    gs = grad(loss, list(trainable.values()))
    return loss.item(), {k: g.data for k, g in zip(trainable, gs)}


def meta_step(
    model: MetaModel,
    batch: TaskBatch,
    opt: ad.Optimizer,
    steps: int = 1,
    create_graph: bool = True,
) -> float:
    if len(batch) == 0:
        raise ValueError("meta-batch is empty")
    loss, grads = meta_gradients(model, batch, steps, create_graph)
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite meta-loss {loss} at optimizer step {opt.t}; "
            f"max |theta| = {max(float(np.abs(p.data).max()) for p in model.params.values()):.3g}"
        )
    ad.step(opt, model.trainable(), grads)
    return loss


@dataclass
class EvalReport:
    per_task: np.ndarray
    mean: float
    half_width: float
    n: int
    extra: dict = field(default_factory=dict)


def confidence_report(values) -> EvalReport:
    """Mean with a normal-approximation 95% half-width (1.96 s / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    sd = float(np.std(v, ddof=1)) if n > 1 else 0.0
    return EvalReport(v, float(np.mean(v)), 1.96 * sd / math.sqrt(n), n)


def _leaf_copy(model: MetaModel) -> dict[str, Tensor]:
    return {k: Tensor(p.data, requires_grad=True) for k, p in model.params.items()}


def adapted_predictions(model: MetaModel, task: Task, x, k: int | None = None, steps: int = 1):
    """Predictions at ``x`` before and after adapting on the first ``k`` support points."""
    k = task.k_support if k is None else k
    base = _leaf_copy(model)
    phi = inner_adapt(model, task.support_x[:k], task.support_y[:k], steps, False, base)
    xq = np.asarray(x, dtype=np.float64).reshape(1, -1, 1)
    before = predict(model.params, xq[0], model.n_layers).data.reshape(-1)
    after = predict(phi, xq, model.n_layers).data.reshape(-1)
    return before, after


def evaluate(model: MetaModel, tasks: list[Task], k: int | None = None, steps: int = 1) -> EvalReport:
    """Adapt on ``k`` support points per task and report the query loss."""
    if not tasks:
        raise ValueError("no test tasks")
    losses = np.empty(len(tasks))
    groups: dict[tuple, list[int]] = {}
    for i, t in enumerate(tasks):
        kk = t.k_support if k is None else k
        if t.k_support < kk or t.k_query < 1:
            raise ValueError(f"test task {i} has {t.k_support} support / {t.k_query} query samples")
        groups.setdefault((kk, t.query_x.shape), []).append(i)
    for (kk, _), idx in groups.items():
        batch = TaskBatch.stack([tasks[i] for i in idx])
        phi = inner_adapt(
            model, batch.support_x[:, :kk], batch.support_y[:, :kk], steps, False, _leaf_copy(model)
        )
        with ad.no_grad():
            losses[idx] = task_losses(phi, batch.query_x, batch.query_y, model).data
    return confidence_report(losses)


def adv_loss(
    model: MetaModel,
    support_x,
    support_y,
    query_x,
    query_y,
    eta1: float,
    eta2: float,
    steps: int = 1,
) -> Tensor:
    """Per-task task difficulty to be maximised by the generator, shape ``(B,)``.

    ``eta1 * L(phi, query) - eta2 * <grad L(theta, support), grad L(theta, query)>``.
    The initialization enters as a detached copy, so nothing flows back into
    the meta-model; gradients flow into the task data.
    """
    sx = _batched(support_x)
    n_tasks = sx.shape[0]
    if eta1 == 0.0 and eta2 == 0.0:
        return Tensor(np.zeros(n_tasks))
    theta = _leaf_copy(model)
    keys = list(theta)
    theta_b = {k: broadcast_to(p, (n_tasks,) + p.shape) for k, p in theta.items()}
    ls = reduce_sum(task_losses(theta_b, sx, support_y, model))
    g_s = grad(ls, [theta_b[k] for k in keys], create_graph=True)
    total = None
    if eta2 != 0.0:
        lq0 = reduce_sum(task_losses(theta_b, query_x, query_y, model))
        g_q = grad(lq0, [theta_b[k] for k in keys], create_graph=True)
        for a, b in zip(g_s, g_q):
            term = reduce_sum(a * b, axis=tuple(range(1, a.ndim)))
            total = term if total is None else total + term
    out = None
    if eta1 != 0.0:
        phi = _adapt(theta_b, sx, support_y, model, _rates(model, detach=True), steps, True, g_s)
        out = task_losses(phi, query_x, query_y, model) * eta1
    if total is not None:
        out = -(total * eta2) if out is None else out - total * eta2
    return out
