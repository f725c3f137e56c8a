"""Task up-sampling for N-way classification on vector-valued samples.

An N-way task with ``K^s`` support and ``K^q`` query samples per class is cut
into ``K^s + K^q`` one-shot tasks (one sample per class, concatenated in class
order); these form the patch. The original one-shot tasks serve as the coarse
tasks, and the decoder moves every sample along residuals towards a small
memory bank of out-of-task samples:

* set encoder: two pointwise convs with batch norm, max-pooled over the patch;
* attention: three pointwise convs per residual, then three linear layers
  over the flattened residual features and the set feature, softmax over the
  bank;
* mapping: three pointwise convs turning each residual into a residual feature.

The sample moves by the attention-weighted sum of the mapped residuals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, amax, broadcast_to, concat, relu, reshape, softmax
from .emd import emd_diff_batch
from .layers import batch_norm, dense, init_dense
from .meta import EvalReport, MetaModel, _leaf_copy, adv_loss, confidence_report, init_model, inner_adapt, meta_step, predict
from .tasks import ClassPool, Task, TaskBatch, sample_synth_class_task, SYNTH_CLASS

NAIVE_VARIANTS = ("random-per-image", "random-per-class", "nearest-per-class")


@dataclass
class ClassAtuConfig:
    n_way: int = 5
    k_support: int = 1
    k_query: int = 15
    beta: tuple[float, float] = (2.0, 2.0)
    r: int = 2
    k_bank: int = 3
    eta: float = 3.0
    inner_steps: int = 5
    inner_lr: float = 0.01
    meta_lr: float = 1e-3
    up_lr: float = 1e-3
    batch_size: int = 4
    hidden: int = 64
    width: int = 32
    iters: int = 2000

    @property
    def n_patch(self) -> int:
        return self.k_support + self.k_query

    def validate(self) -> None:
        if self.k_bank < 1:
            raise ValueError("memory bank needs K_M >= 1")
        if self.r < 1 or self.batch_size < 1 or self.inner_steps < 1:
            raise ValueError("r, batch size and inner steps must be positive")
        if min(self.beta) <= 0:
            raise ValueError(f"Beta parameters must be positive, got {self.beta}")


# ---------------------------------------------------------------------------
# patches, memory bank, ground truth
# ---------------------------------------------------------------------------

def _class_blocks(x: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    """Samples grouped per class, ``(n_way, k, d)``; rejects ragged classes."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_way)
    if len(counts) != n_way or np.any(counts != counts[0]):
        raise ValueError(f"class sizes differ: {counts.tolist()}")
    order = np.argsort(labels, kind="stable")
    return np.asarray(x)[order].reshape(n_way, counts[0], -1)


def split_to_patch(task: Task, n_way: int | None = None) -> np.ndarray:
    """Patch of one-shot tasks ``(K^s + K^q, n_way * d)``: support shots first."""
    n_way = len(np.unique(task.support_y)) if n_way is None else n_way
    s = _class_blocks(task.support_x, task.support_y, n_way)
    q = _class_blocks(task.query_x, task.query_y, n_way)
    both = np.concatenate([s, q], axis=1)  # (n_way, K^s + K^q, d)
    return np.transpose(both, (1, 0, 2)).reshape(both.shape[1], -1)


def patch_to_task(patch, n_way: int, k_support: int, k_query: int, classes=()) -> Task:
    """Inverse of :func:`split_to_patch`; samples come back class-sorted."""
    p = np.asarray(patch)
    if p.shape[0] != k_support + k_query or p.shape[1] % n_way:
        raise ValueError(f"patch of shape {p.shape} does not hold {k_support}+{k_query} {n_way}-way shots")
    blocks = np.transpose(p.reshape(p.shape[0], n_way, -1), (1, 0, 2))
    labels = np.arange(n_way)
    return Task(
        blocks[:, :k_support].reshape(n_way * k_support, -1),
        np.repeat(labels, k_support),
        blocks[:, k_support:].reshape(n_way * k_query, -1),
        np.repeat(labels, k_query),
        SYNTH_CLASS,
        None,
        tuple(classes),
    )


@dataclass(frozen=True)
class MemoryBank:
    vectors: np.ndarray  # (K_M, d)
    classes: tuple[int, ...]


def sample_bank(rng: np.random.Generator, pool: ClassPool, exclude, k_bank: int = 3) -> MemoryBank:
    """One sample from each of ``k_bank`` distinct pool classes outside ``exclude``."""
    allowed = np.setdiff1d(np.arange(pool.n_classes), np.asarray(list(exclude), dtype=np.int64))
    if len(allowed) < k_bank:
        raise ValueError(f"only {len(allowed)} classes outside the task, need {k_bank}")
    classes = rng.choice(allowed, size=k_bank, replace=False)
    vecs = np.stack([pool.sample(rng, int(c), 1)[0] for c in classes])
    return MemoryBank(vecs, tuple(int(c) for c in classes))


def nearest_in_bank(x: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Index of the nearest bank vector for every row of ``x`` (lowest index on ties)."""
    d = ((np.asarray(x)[:, None, :] - bank[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def _mix(task: Task, lam: float, partner_s: np.ndarray, partner_q: np.ndarray) -> Task:
    return Task(
        lam * task.support_x + (1.0 - lam) * partner_s,
        task.support_y.copy(),
        lam * task.query_x + (1.0 - lam) * partner_q,
        task.query_y.copy(),
        task.family,
        None,
        task.classes,
    )


def build_ground_truth(
    task: Task, bank: MemoryBank, rng: np.random.Generator, beta=(2.0, 2.0), lam: float | None = None
) -> Task:
    """Mix every sample with its nearest bank vector; one ``lam ~ Beta`` per task."""
    lam = float(rng.beta(*beta)) if lam is None else float(lam)
    b = bank.vectors
    return _mix(task, lam, b[nearest_in_bank(task.support_x, b)], b[nearest_in_bank(task.query_x, b)])


def naive_mix_baseline(
    task: Task,
    bank: MemoryBank,
    rng: np.random.Generator,
    variant: str,
    beta=(2.0, 2.0),
    lam: float | None = None,
) -> Task:
    """Mix with bank vectors chosen per sample at random, per class at random,
    or per class as the vector nearest to the class centroid."""
    if variant not in NAIVE_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {NAIVE_VARIANTS}")
    lam = float(rng.beta(*beta)) if lam is None else float(lam)
    b = bank.vectors
    sy, qy = np.asarray(task.support_y), np.asarray(task.query_y)
    if variant == "random-per-image":
        ps = b[rng.integers(len(b), size=len(sy))]
        pq = b[rng.integers(len(b), size=len(qy))]
        return _mix(task, lam, ps, pq)
    n_cls = int(max(sy.max(), qy.max())) + 1
    if variant == "random-per-class":
        pick = rng.integers(len(b), size=n_cls)
    else:
        allx = np.concatenate([task.support_x, task.query_x])
        ally = np.concatenate([sy, qy])
        centroids = np.stack([allx[ally == c].mean(0) for c in range(n_cls)])
        pick = nearest_in_bank(centroids, b)
    return _mix(task, lam, b[pick[sy]], b[pick[qy]])


# ---------------------------------------------------------------------------
# up-sampler
# ---------------------------------------------------------------------------

@dataclass
class ClassUpsamplerParams:
    weights: dict[str, Tensor]
    n_way: int
    dim: int
    n_patch: int
    k_bank: int

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: w.data.copy() for k, w in self.weights.items()}


def init_class_upsampler(
    rng: np.random.Generator, n_way: int, dim: int, n_patch: int, k_bank: int = 3, width: int = 32
) -> ClassUpsamplerParams:
    w: dict[str, Tensor] = {}

    def add(name, fi, fo):
        a, b = init_dense(rng, fi, fo)
        w[f"{name}/w"] = Tensor(a, requires_grad=True)
        w[f"{name}/b"] = Tensor(b, requires_grad=True)

    add("gs/conv0", n_way * dim, width)
    add("gs/conv1", width, width)
    add("att/conv0", dim + 1, width)
    add("att/conv1", width, width)
    add("att/conv2", width, width)
    add("att/fc0", k_bank * width + width, 2 * width)
    add("att/fc1", 2 * width, 2 * width)
    add("att/fc2", 2 * width, k_bank)
    add("map/conv0", dim + 1, width)
    add("map/conv1", width, width)
    add("map/conv2", width, dim)
    return ClassUpsamplerParams(w, n_way, dim, n_patch, k_bank)


def _l(w, name, x):
    return dense(x, w[f"{name}/w"], w[f"{name}/b"])


def sample_class_noise(rng: np.random.Generator, r: int, n_patch: int, k_bank: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(r, n_patch, k_bank))


def class_upsample_batch(params: ClassUpsamplerParams, patches, banks, noises) -> tuple[Tensor, Tensor]:
    """Batched up-sampling over ``T`` tasks.

    ``patches`` ``(T, N_p, n_way * d)``, ``banks`` ``(T, K_M, d)``, ``noises``
    ``(T, r, N_p, K_M)``. Returns up-sampled patches ``(T, r, N_p, n_way * d)``
    and attention scores ``(T, r, N_p, n_way, K_M)``. Batch norm statistics
    are taken per task over its patch.
    """
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    banks = np.asarray(banks, dtype=np.float64)
    noises = np.asarray(noises, dtype=np.float64)
    n, d, km = params.n_way, params.dim, params.k_bank
    if patches.ndim != 3 or patches.shape[2] != n * d:
        raise ValueError(f"patches must be (T, N_p, {n}*{d}), got {patches.shape}")
    t, n_p, _ = patches.shape
    if banks.shape != (t, km, d):
        raise ValueError(f"banks must be ({t}, {km}, {d}), got {banks.shape}")
    if noises.ndim != 4 or noises.shape[0] != t or noises.shape[2:] != (n_p, km):
        raise ValueError(f"noise must be ({t}, r, {n_p}, {km}), got {noises.shape}")
    r = noises.shape[1]
    w = params.weights

    h = relu(batch_norm(_l(w, "gs/conv0", patches), axis=1))
    h = batch_norm(_l(w, "gs/conv1", h), axis=1)
    h_s = amax(h, axis=1, keepdims=True)  # (T, 1, width)

    shape = (t, r, n_p, n, km)
    x = reshape(patches, (t, 1, n_p, n, 1, d))
    res = broadcast_to(Tensor(banks.reshape(t, 1, 1, 1, km, d)) - x, shape + (d,))
    z = Tensor(np.broadcast_to(noises[:, :, :, None, :, None], shape + (1,)).copy())
    inp = concat([res, z], axis=-1)

    a = relu(_l(w, "att/conv0", inp))
    a = relu(_l(w, "att/conv1", a))
    a = relu(_l(w, "att/conv2", a))
    width = a.shape[-1]
    a = reshape(a, (t, r, n_p, n, km * width))
    hs_b = broadcast_to(reshape(h_s, (t, 1, 1, 1, width)), (t, r, n_p, n, width))
    a = concat([a, hs_b], axis=-1)
    a = relu(_l(w, "att/fc0", a))
    a = relu(_l(w, "att/fc1", a))
    scores = softmax(_l(w, "att/fc2", a), axis=-1)  # (T, r, N_p, n, K_M)

    m = relu(_l(w, "map/conv0", inp))
    m = relu(_l(w, "map/conv1", m))
    m = _l(w, "map/conv2", m)  # (T, r, N_p, n, K_M, d)
    moved = ad.reduce_sum(m * reshape(scores, shape + (1,)), axis=4)
    out = broadcast_to(reshape(patches, (t, 1, n_p, n, d)), (t, r, n_p, n, d)) + moved
    return reshape(out, (t, r, n_p, n * d)), scores


def class_upsample_patch(params: ClassUpsamplerParams, patch, bank, noise) -> tuple[Tensor, Tensor]:
    """Single-task form: patch ``(N_p, n_way * d)``, noise ``(r, N_p, K_M)``."""
    patch = patch if isinstance(patch, Tensor) else Tensor(patch)
    bank = np.asarray(bank.vectors if isinstance(bank, MemoryBank) else bank, dtype=np.float64)
    up, scores = class_upsample_batch(
        params, reshape(patch, (1,) + patch.shape), bank[None], np.asarray(noise)[None]
    )
    return reshape(up, up.shape[1:]), reshape(scores, scores.shape[1:])


def class_upsample(params: ClassUpsamplerParams, task: Task, bank, noise, k_support: int, k_query: int) -> list[Task]:
    """``r`` augmented tasks, one per noise draw; labels are kept."""
    patch = split_to_patch(task, params.n_way)
    with ad.no_grad():
        up, _ = class_upsample_patch(params, patch, bank, noise)
    return [patch_to_task(p, params.n_way, k_support, k_query, task.classes) for p in up.data]


def _patch_split(up: Tensor, n_way: int, k_support: int):
    """Support and query inputs of stacked patches ``(M, N_p, n_way*d)``, class-sorted."""
    m, n_p, nd = up.shape
    d = nd // n_way
    blocks = ad.swapaxes(reshape(up, (m, n_p, n_way, d)), 1, 2)  # (M, n_way, N_p, d)
    k_q = n_p - k_support
    sx = reshape(blocks[:, :, :k_support, :], (m, n_way * k_support, d))
    qx = reshape(blocks[:, :, k_support:, :], (m, n_way * k_q, d))
    return sx, qx


def class_atu_loss(
    params: ClassUpsamplerParams,
    patches: np.ndarray,
    ground_truths: np.ndarray,
    banks: np.ndarray,
    noises: np.ndarray,
    model: MetaModel,
    cfg: ClassAtuConfig,
) -> tuple[Tensor, dict[str, float]]:
    """EMD between every up-sampled patch and its task's ground-truth patch,
    minus the adversarial loss, both averaged over all ``T * r`` generated tasks."""
    up, _ = class_upsample_batch(params, patches, banks, noises)
    t, r, n_p, nd = up.shape
    flat = reshape(up, (t * r, n_p, nd))
    gt = np.repeat(np.asarray(ground_truths), r, axis=0)
    d_emd = ad.mean(emd_diff_batch(flat, Tensor(gt)))
    loss = d_emd
    parts = {"emd": d_emd.item(), "adv": 0.0}
    if cfg.eta != 0.0:
        sx, qx = _patch_split(flat, cfg.n_way, cfg.k_support)
        ys = np.broadcast_to(np.repeat(np.arange(cfg.n_way), cfg.k_support), (t * r, sx.shape[1]))
        yq = np.broadcast_to(np.repeat(np.arange(cfg.n_way), cfg.k_query), (t * r, qx.shape[1]))
        adv = ad.mean(adv_loss(model, sx, ys, qx, yq, cfg.eta, cfg.eta, cfg.inner_steps))
        loss = loss - adv
        parts["adv"] = adv.item()
    parts["loss"] = loss.item()
    return loss, parts


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class ClassRun:
    model: MetaModel
    meta_opt: ad.Optimizer
    rng: np.random.Generator
    upsampler: ClassUpsamplerParams | None = None
    up_opt: ad.Optimizer | None = None
    augment: str = "none"
    iteration: int = 0
    meta_losses: list[float] = field(default_factory=list)
    up_history: list[dict[str, float]] = field(default_factory=list)


CLASS_AUGMENTS = ("none", "atu", "tu") + NAIVE_VARIANTS


def new_class_run(
    seed: int, cfg: ClassAtuConfig, dim: int, augment: str = "none", metasgd: bool = False
) -> ClassRun:
    """Fresh classification run; model initialisation depends on the seed only,
    so runs with different augmentations start from the same weights."""
    if augment not in CLASS_AUGMENTS:
        raise ValueError(f"unknown augmentation {augment!r}; choose from {CLASS_AUGMENTS}")
    cfg.validate()
    seeds = np.random.SeedSequence(seed).spawn(3)
    arch = (dim, cfg.hidden, cfg.hidden, cfg.n_way)
    model = init_model(np.random.default_rng(seeds[0]), arch, cfg.inner_lr, metasgd, loss="ce")
    run = ClassRun(model, ad.adam(cfg.meta_lr), np.random.default_rng(seeds[1]), augment=augment)
    if augment in ("atu", "tu"):
        run.upsampler = init_class_upsampler(
            np.random.default_rng(seeds[2]), cfg.n_way, dim, cfg.n_patch, cfg.k_bank, cfg.width
        )
        run.up_opt = ad.adam(cfg.up_lr)
    return run


def class_atu_train(run: ClassRun, pool: ClassPool, cfg: ClassAtuConfig, n_iters: int | None = None) -> ClassRun:
    """Meta-train until ``run.iteration == n_iters``.

    With the up-sampler every meta-batch task is replaced by one randomly
    chosen up-sampled task; the up-sampler then takes one step on the batch.
    ``tu`` drops the adversarial term; the naive variants replace each task by
    a mixed copy.
    """
    n_iters = cfg.iters if n_iters is None else n_iters
    rng = run.rng
    eta = 0.0 if run.augment == "tu" else cfg.eta
    up_cfg = cfg if eta == cfg.eta else ClassAtuConfig(**{**cfg.__dict__, "eta": eta})
    while run.iteration < n_iters:
        tasks = [sample_synth_class_task(rng, cfg.n_way, cfg.k_support, cfg.k_query, pool) for _ in range(cfg.batch_size)]
        train_tasks = tasks
        if run.augment != "none":
            banks = [sample_bank(rng, pool, t.classes, cfg.k_bank) for t in tasks]
        if run.augment in NAIVE_VARIANTS:
            train_tasks = [naive_mix_baseline(t, b, rng, run.augment, cfg.beta) for t, b in zip(tasks, banks)]
        elif run.upsampler is not None:
            gts = np.stack([split_to_patch(build_ground_truth(t, b, rng, cfg.beta), cfg.n_way) for t, b in zip(tasks, banks)])
            patches = np.stack([split_to_patch(t, cfg.n_way) for t in tasks])
            bank_arr = np.stack([b.vectors for b in banks])
            noises = np.stack([sample_class_noise(rng, cfg.r, cfg.n_patch, cfg.k_bank) for _ in tasks])
            picks = rng.integers(cfg.r, size=len(tasks))
            with ad.no_grad():
                up, _ = class_upsample_batch(run.upsampler, patches, bank_arr, noises)
            train_tasks = [
                patch_to_task(up.data[i, k], cfg.n_way, cfg.k_support, cfg.k_query, t.classes)
                for i, (t, k) in enumerate(zip(tasks, picks))
            ]
        loss = meta_step(run.model, TaskBatch.stack(train_tasks), run.meta_opt, cfg.inner_steps)
        run.meta_losses.append(loss)
        if run.upsampler is not None:
            before = run.model.snapshot()
            up_loss, parts = class_atu_loss(
                run.upsampler, patches, gts, bank_arr, noises, run.model, up_cfg
            )
            if not math.isfinite(parts["loss"]):
                raise FloatingPointError(f"non-finite up-sampler loss at iteration {run.iteration}: {parts}")
            names = list(run.upsampler.weights)
            grads = ad.grad(up_loss, [run.upsampler.weights[k] for k in names])
            ad.step(run.up_opt, run.upsampler.weights, dict(zip(names, grads)))
            after = run.model.snapshot()
            for k, v in before.items():
                if not np.array_equal(v, after[k]):
                    raise AssertionError(f"meta-model parameter {k} changed during the up-sampler update")
            run.up_history.append(parts)
        run.iteration += 1
    return run


def save_class_run(path, run: ClassRun, meta: dict | None = None) -> None:
    from . import checkpoint as ck

    tensors: dict[str, np.ndarray] = {}
    info = {
        "model": ck.pack_model(run.model, tensors),
        "meta_opt": ck.pack_optimizer("meta_opt", run.meta_opt, tensors),
        "rng": ck.rng_state(run.rng),
        "augment": run.augment,
        "iteration": run.iteration,
        "meta_losses": run.meta_losses,
        "up_history": run.up_history,
        "upsampler": None,
        "extra": meta or {},
    }
    up = run.upsampler
    if up is not None:
        for k, w in up.weights.items():
            tensors[f"up/{k}"] = w.data
        info["upsampler"] = {f.name: getattr(up, f.name) for f in fields(up) if f.name != "weights"}
        info["up_opt"] = ck.pack_optimizer("up_opt", run.up_opt, tensors)
    ck.save(path, tensors, info)


def load_class_run(path) -> tuple[ClassRun, dict]:
    from . import checkpoint as ck

    tensors, info = ck.load(path)
    run = ClassRun(
        ck.unpack_model(info["model"], tensors),
        ck.unpack_optimizer("meta_opt", info["meta_opt"], tensors),
        ck.rng_from_state(info["rng"]),
        augment=info["augment"],
        iteration=info["iteration"],
        meta_losses=list(info["meta_losses"]),
        up_history=list(info["up_history"]),
    )
    ui = info["upsampler"]
    if ui is not None:
        weights = {k[3:]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("up/")}
        run.upsampler = ClassUpsamplerParams(weights, **ui)
        run.up_opt = ck.unpack_optimizer("up_opt", info["up_opt"], tensors)
    return run, info["extra"]


def accuracy_report(model: MetaModel, tasks: list[Task], steps: int = 5) -> EvalReport:
    """Per-task query accuracy after ``steps`` adaptation steps on the support set."""
    if not tasks:
        raise ValueError("no test tasks")
    batch = TaskBatch.stack(tasks)
    phi = inner_adapt(model, batch.support_x, batch.support_y, steps, False, _leaf_copy(model))
    with ad.no_grad():
        logits = predict(phi, batch.query_x, model.n_layers).data
    acc = (logits.argmax(-1) == batch.query_y).mean(axis=1)
    return confidence_report(acc)


def sample_class_test_set(
    rng: np.random.Generator, pool: ClassPool, cfg: ClassAtuConfig, n_tasks: int = 600
) -> list[Task]:
    return [sample_synth_class_task(rng, cfg.n_way, cfg.k_support, cfg.k_query, pool) for _ in range(n_tasks)]
