"""Task up-sampling network for sinusoid regression and its training loops.

A task patch of ``N_p`` task vectors goes through

* a set encoder: two pointwise (kernel-1) convolutions over the tasks and a
  max-pool over the patch, giving a 1024-d set feature;
* a coarse generator: its own set encoder plus three linear layers emitting
  ``r_c * N_p`` coarse task vectors;
* a decoder: three pointwise convolutions mapping
  ``[coarse task, noise, set feature]`` to a residual on the coarse task,
  once per noise vector, for ``r_c * r_d * N_p`` tasks in total.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, amax, broadcast_to, clip, concat, relu, reshape
from .emd import emd_diff, emd_diff_batch, fps
from .layers import dense, init_dense
from .meta import MetaModel, adv_loss, meta_step
from .tasks import DEFAULT_RANGES, DomainRanges, TaskBatch, sample_sine_tasks, tasks_to_matrix, vector_to_task


@dataclass
class AtuConfig:
    eta1: float = 8e-3
    eta2: float = 4e-3
    eta3: float = 0.3
    r_c: int = 2
    r_d: int = 4
    n_ground_truth: int = 64
    max_iters: int = 3750
    aug_ratio: float = 0.2
    lr: float = 1e-3
    encoder_widths: tuple[int, int] = (128, 1024)
    coarse_hidden: tuple[int, int] = (256, 256)
    decoder_widths: tuple[int, int] = (128, 64)
    noise_low: float = -1.0
    noise_high: float = 1.0
    # Clamp generated coordinates to the patch's x and y ranges. Without it the
    # adversarial term can grow faster than the EMD anchor and training diverges.
    bounded: bool = True

    @property
    def ratio(self) -> int:
        return self.r_c * self.r_d

    @property
    def n_patch(self) -> int:
        return self.n_ground_truth // self.ratio

    def validate(self) -> None:
        if self.r_c < 1 or self.r_d < 1:
            raise ValueError("r_c and r_d must be positive")
        if self.n_ground_truth % self.ratio:
            raise ValueError(
                f"|T_g| = {self.n_ground_truth} is not a multiple of r = {self.ratio}"
            )
        if not 0.0 <= self.aug_ratio <= 1.0:
            raise ValueError(f"augmentation ratio {self.aug_ratio} outside [0, 1]")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class UpsamplerParams:
    weights: dict[str, Tensor]
    vec_len: int
    n_patch: int
    r_c: int
    r_d: int
    bounded: bool = True

    @property
    def n_out(self) -> int:
        return self.r_c * self.r_d * self.n_patch

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: w.data.copy() for k, w in self.weights.items()}


def _add_dense(weights, rng, name, fi, fo):
    w, b = init_dense(rng, fi, fo)
    weights[f"{name}/w"] = Tensor(w, requires_grad=True)
    weights[f"{name}/b"] = Tensor(b, requires_grad=True)


def init_upsampler(rng: np.random.Generator, vec_len: int, cfg: AtuConfig) -> UpsamplerParams:
    cfg.validate()
    weights: dict[str, Tensor] = {}
    e0, e1 = cfg.encoder_widths
    for enc in ("gs", "gc/enc"):
        _add_dense(weights, rng, f"{enc}/conv0", vec_len, e0)
        _add_dense(weights, rng, f"{enc}/conv1", e0, e1)
    h0, h1 = cfg.coarse_hidden
    _add_dense(weights, rng, "gc/fc0", e1, h0)
    _add_dense(weights, rng, "gc/fc1", h0, h1)
    _add_dense(weights, rng, "gc/fc2", h1, cfg.r_c * cfg.n_patch * vec_len)
    d0, d1 = cfg.decoder_widths
    _add_dense(weights, rng, "gd/conv0", vec_len + cfg.r_d + e1, d0)
    _add_dense(weights, rng, "gd/conv1", d0, d1)
    _add_dense(weights, rng, "gd/conv2", d1, vec_len)
    return UpsamplerParams(weights, vec_len, cfg.n_patch, cfg.r_c, cfg.r_d, cfg.bounded)


def _layer(w, name, x):
    return dense(x, w[f"{name}/w"], w[f"{name}/b"])


def set_feature(w: dict[str, Tensor], prefix: str, patch: Tensor) -> Tensor:
    h = relu(_layer(w, f"{prefix}/conv0", patch))
    h = _layer(w, f"{prefix}/conv1", h)
    return amax(h, axis=0, keepdims=True)


def sample_noise(rng: np.random.Generator, cfg: AtuConfig) -> np.ndarray:
    return rng.uniform(cfg.noise_low, cfg.noise_high, size=(cfg.r_d, cfg.r_d))


def upsample_vectors(params: UpsamplerParams, patch, noise) -> Tensor:
    """Up-sampled task vectors, ``(r_c * r_d * N_p, L)``.

    Row ``c * r_d + j`` is coarse task ``c`` refined with noise vector ``j``.
    """
    patch = patch if isinstance(patch, Tensor) else Tensor(patch)
    if patch.shape != (params.n_patch, params.vec_len):
        raise ValueError(
            f"patch must be ({params.n_patch}, {params.vec_len}), got {patch.shape}"
        )
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape != (params.r_d, params.r_d):
        raise ValueError(f"noise must be ({params.r_d}, {params.r_d}), got {noise.shape}")
    w = params.weights
    L, rd = params.vec_len, params.r_d
    n_coarse = params.r_c * params.n_patch

    h_s = set_feature(w, "gs", patch)
    f = set_feature(w, "gc/enc", patch)
    f = relu(_layer(w, "gc/fc0", f))
    f = relu(_layer(w, "gc/fc1", f))
    coarse = reshape(_layer(w, "gc/fc2", f), (n_coarse, 1, L))
    feat = h_s.shape[-1]

    coarse_b = broadcast_to(coarse, (n_coarse, rd, L))
    noise_b = broadcast_to(reshape(noise, (1, rd, rd)), (n_coarse, rd, rd))
    feat_b = broadcast_to(reshape(h_s, (1, 1, feat)), (n_coarse, rd, feat))
    h = concat([coarse_b, noise_b, feat_b], axis=-1)
    h = relu(_layer(w, "gd/conv0", h))
    h = relu(_layer(w, "gd/conv1", h))
    residual = _layer(w, "gd/conv2", h)
    out = reshape(coarse_b + residual, (n_coarse * rd, L))
    if params.bounded:
        lo, hi = patch_bounds(patch.data)
        out = clip(out, lo, hi)
    return out


def patch_bounds(patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate bounds for generated vectors: the patch's x range and y range."""
    pts = patch.reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    reps = patch.shape[-1] // 2
    return np.tile(lo, reps), np.tile(hi, reps)


def upsample(params: UpsamplerParams, patch_tasks, noise, k_support: int, k_query: int):
    """Up-sample a patch of sine tasks and return the generated tasks."""
    if len(patch_tasks) != params.n_patch:
        raise ValueError(f"patch holds {len(patch_tasks)} tasks, expected N_p = {params.n_patch}")
    with ad.no_grad():
        out = upsample_vectors(params, tasks_to_matrix(patch_tasks), noise)
    return [vector_to_task(v, k_support, k_query) for v in out.data]


def split_vectors(vectors: Tensor, k_support: int, k_query: int):
    """Support and query (x, y) points, each ``(T, K, 2)``."""
    pairs = reshape(vectors, (vectors.shape[0], k_support + k_query, 2))
    return pairs[:, :k_support, :], pairs[:, k_support:, :]


def atu_loss_regression(
    params: UpsamplerParams,
    patch,
    noise,
    ground_truth,
    model: MetaModel,
    cfg: AtuConfig,
    k_support: int,
    k_query: int,
) -> tuple[Tensor, dict[str, float]]:
    """Set EMD to the ground truth + eta3 * support/query EMD - mean adversarial loss."""
    gt = ground_truth if isinstance(ground_truth, Tensor) else Tensor(ground_truth)
    if gt.shape[0] != params.n_out:
        raise ValueError(f"ground truth holds {gt.shape[0]} tasks, expected r * N_p = {params.n_out}")
    if cfg.eta3 > 0 and k_support != k_query:
        raise ValueError("support/query EMD needs K^s == K^q")
    up = upsample_vectors(params, patch, noise)
    d_set = emd_diff(up, gt)
    loss = d_set
    parts = {"emd": d_set.item(), "sq_emd": 0.0, "adv": 0.0}
    sup, qry = split_vectors(up, k_support, k_query)
    if cfg.eta3 > 0:
        d_sq = ad.mean(emd_diff_batch(sup, qry))
        loss = loss + d_sq * cfg.eta3
        parts["sq_emd"] = d_sq.item()
    if cfg.eta1 != 0.0 or cfg.eta2 != 0.0:
        adv = ad.mean(
            adv_loss(
                model,
                sup[:, :, 0:1],
                sup[:, :, 1:2],
                qry[:, :, 0:1],
                qry[:, :, 1:2],
                cfg.eta1,
                cfg.eta2,
            )
        )
        loss = loss - adv
        parts["adv"] = adv.item()
    parts["loss"] = loss.item()
    return loss, parts


def build_patch(ground_truth: np.ndarray, n_patch: int) -> np.ndarray:
    return fps(ground_truth, n_patch, 0)


class IsolationError(AssertionError):
    """The meta-model changed during an up-sampler update."""


def upsampler_update(
    params: UpsamplerParams,
    opt: ad.Optimizer,
    ground_truth: np.ndarray,
    noise: np.ndarray,
    model: MetaModel,
    cfg: AtuConfig,
    k_support: int,
    k_query: int,
) -> dict[str, float]:
    """One Adam step on the up-sampler; asserts the meta-model is untouched."""
    before = model.snapshot()
    patch = ground_truth[build_patch(ground_truth, params.n_patch)]
    loss, parts = atu_loss_regression(
        params, patch, noise, ground_truth, model, cfg, k_support, k_query
    )
    if not math.isfinite(parts["loss"]):
        raise FloatingPointError(f"non-finite up-sampler loss at step {opt.t}: {parts}")
    names = list(params.weights)
    grads = ad.grad(loss, [params.weights[k] for k in names])
    ad.step(opt, params.weights, dict(zip(names, grads)))
    after = model.snapshot()
    for k, v in before.items():
        if not np.array_equal(v, after[k]):
            raise IsolationError(f"meta-model parameter {k} changed during the up-sampler update")
    return parts


def train_upsampler(
    params: UpsamplerParams,
    models: MetaModel | Callable[[int], MetaModel],
    rng: np.random.Generator,
    cfg: AtuConfig,
    iters: int | None = None,
    k: int = 10,
    ranges: DomainRanges = DEFAULT_RANGES,
    opt: ad.Optimizer | None = None,
) -> list[dict[str, float]]:
    """Train the up-sampler alone against a fixed model or a model stream."""
    iters = cfg.max_iters if iters is None else iters
    opt = ad.adam(cfg.lr) if opt is None else opt
    history = []
    for it in range(iters):
        model = models(it) if callable(models) else models
        gt = tasks_to_matrix(sample_sine_tasks(rng, cfg.n_ground_truth, ranges, k, k))
        noise = sample_noise(rng, cfg)
        history.append(upsampler_update(params, opt, gt, noise, model, cfg, k, k))
    return history


# ---------------------------------------------------------------------------
# meta-training loop (vanilla, TU and ATU share it)
# ---------------------------------------------------------------------------

@dataclass
class RegressionRun:
    """Mutable state of a regression meta-training run (everything a resume needs)."""

    model: MetaModel
    meta_opt: ad.Optimizer
    task_rng: np.random.Generator
    upsampler: UpsamplerParams | None = None
    up_opt: ad.Optimizer | None = None
    noise_rng: np.random.Generator | None = None
    split_rng: np.random.Generator | None = None
    iteration: int = 0
    up_iters: int = 0
    ratio_carry: float = 0.0
    meta_losses: list[float] = field(default_factory=list)
    up_history: list[dict[str, float]] = field(default_factory=list)
    last_generated: np.ndarray | None = None


def atu_meta_train(
    run: RegressionRun,
    cfg: AtuConfig,
    n_outer: int,
    k: int = 10,
    batch_size: int = 4,
    ranges: DomainRanges = DEFAULT_RANGES,
    stop_after: int | None = None,
    on_iteration: Callable[[RegressionRun], None] | None = None,
) -> RegressionRun:
    """Run outer iterations until ``run.iteration == n_outer``.

    Each outer iteration samples ``|T_g|`` fresh tasks, splits them into
    ``|T_g| / B`` meta-batches and replaces a fraction ``aug_ratio`` of those
    batches (carried across iterations) with batches of up-sampled tasks.
    Afterwards the up-sampler takes one step of its own objective while it has
    iterations left. Without an up-sampler this is plain MAML/MetaSGD.
    """
    cfg.validate()
    if cfg.n_ground_truth % batch_size:
        raise ValueError(f"|T_g| = {cfg.n_ground_truth} is not a multiple of B = {batch_size}")
    n_batches = cfg.n_ground_truth // batch_size
    up = run.upsampler
    done = 0
    while run.iteration < n_outer:
        if stop_after is not None and done >= stop_after:
            break
        gt_tasks = sample_sine_tasks(run.task_rng, cfg.n_ground_truth, ranges, k, k)
        gt_batch = TaskBatch.stack(gt_tasks)

        n_gen = 0
        if up is not None and cfg.aug_ratio > 0:
            run.ratio_carry += cfg.aug_ratio * n_batches
            n_gen = int(math.floor(run.ratio_carry + 1e-9))
            run.ratio_carry -= n_gen
        n_orig = n_batches - n_gen

        losses = []
        for b in range(n_orig):
            sl = slice(b * batch_size, (b + 1) * batch_size)
            losses.append(meta_step(run.model, gt_batch.take(sl), run.meta_opt))

        train_up = up is not None and run.up_iters < cfg.max_iters
        if n_gen > 0 or train_up:
            gt_vecs = tasks_to_matrix(gt_tasks)
            noise = sample_noise(run.noise_rng, cfg)
        if n_gen > 0:
            patch = gt_vecs[build_patch(gt_vecs, up.n_patch)]
            with ad.no_grad():
                gen = upsample_vectors(up, patch, noise).data
            run.last_generated = gen
            gen_batch = TaskBatch.from_vectors(gen, k, k)
            order = run.split_rng.permutation(len(gen))
            for b in range(n_gen):
                idx = order[b * batch_size : (b + 1) * batch_size]
                losses.append(meta_step(run.model, gen_batch.take(idx), run.meta_opt))
        if train_up:
            run.up_history.append(
                upsampler_update(up, run.up_opt, gt_vecs, noise, run.model, cfg, k, k)
            )
            run.up_iters += 1

        run.meta_losses.append(float(np.mean(losses)))
        run.iteration += 1
        done += 1
        if on_iteration is not None:
            on_iteration(run)
    return run


def new_regression_run(
    seed: int,
    cfg: AtuConfig,
    k: int = 10,
    with_upsampler: bool = False,
    metasgd: bool = False,
    alpha: float = 0.01,
    meta_lr: float = 1e-3,
) -> RegressionRun:
    """Fresh run state; independent RNG streams keep the task stream identical
    whether or not an up-sampler is attached."""
    from .meta import init_model

    seeds = np.random.SeedSequence(seed).spawn(5)
    init_rng = np.random.default_rng(seeds[0])
    model = init_model(init_rng, alpha=alpha, metasgd=metasgd)
    run = RegressionRun(model, ad.adam(meta_lr), np.random.default_rng(seeds[1]))
    if with_upsampler:
        up_rng = np.random.default_rng(seeds[2])
        run.upsampler = init_upsampler(up_rng, 4 * k, cfg)
        run.up_opt = ad.adam(cfg.lr)
        run.noise_rng = np.random.default_rng(seeds[3])
        run.split_rng = np.random.default_rng(seeds[4])
    return run


# ---------------------------------------------------------------------------
# analysis helpers
# ---------------------------------------------------------------------------

def sinusoid_residual(x, y, freqs=np.linspace(0.2, 2.5, 116)) -> float:
    """Mean squared residual of the best fit ``a sin(w x) + c cos(w x) + d``.

    The frequency is scanned on a grid; amplitude, phase and offset come from
    linear least squares at each grid frequency.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    best = np.inf
    for w in freqs:
        design = np.stack([np.sin(w * x), np.cos(w * x), np.ones_like(x)], axis=1)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        r = float(np.mean((design @ coef - y) ** 2))
        best = min(best, r)
    return best


def generated_fit_residual(vectors: np.ndarray, k_support: int, k_query: int) -> float:
    """Average best-fit-sinusoid residual over generated tasks (support and query together)."""
    pairs = np.asarray(vectors).reshape(len(vectors), k_support + k_query, 2)
    return float(np.mean([sinusoid_residual(p[:, 0], p[:, 1]) for p in pairs]))


# ---------------------------------------------------------------------------
# run checkpoints
# ---------------------------------------------------------------------------

def save_regression_run(path, run: RegressionRun, meta: dict | None = None) -> None:
    from . import checkpoint as ck

    tensors: dict[str, np.ndarray] = {}
    info = {
        "model": ck.pack_model(run.model, tensors),
        "meta_opt": ck.pack_optimizer("meta_opt", run.meta_opt, tensors),
        "rng": {
            "task": ck.rng_state(run.task_rng),
            "noise": ck.rng_state(run.noise_rng),
            "split": ck.rng_state(run.split_rng),
        },
        "iteration": run.iteration,
        "up_iters": run.up_iters,
        "ratio_carry": run.ratio_carry,
        "meta_losses": run.meta_losses,
        "up_history": run.up_history,
        "upsampler": None,
        "extra": meta or {},
    }
    up = run.upsampler
    if up is not None:
        for k, w in up.weights.items():
            tensors[f"up/{k}"] = w.data
        info["upsampler"] = {"vec_len": up.vec_len, "n_patch": up.n_patch, "r_c": up.r_c, "r_d": up.r_d, "bounded": up.bounded}
        info["up_opt"] = ck.pack_optimizer("up_opt", run.up_opt, tensors)
    if run.last_generated is not None:
        tensors["last_generated"] = run.last_generated
    ck.save(path, tensors, info)


def load_regression_run(path) -> tuple[RegressionRun, dict]:
    from . import checkpoint as ck

    tensors, info = ck.load(path)
    run = RegressionRun(
        ck.unpack_model(info["model"], tensors),
        ck.unpack_optimizer("meta_opt", info["meta_opt"], tensors),
        ck.rng_from_state(info["rng"]["task"]),
        noise_rng=ck.rng_from_state(info["rng"]["noise"]),
        split_rng=ck.rng_from_state(info["rng"]["split"]),
        iteration=info["iteration"],
        up_iters=info["up_iters"],
        ratio_carry=info["ratio_carry"],
        meta_losses=list(info["meta_losses"]),
        up_history=list(info["up_history"]),
        last_generated=tensors.get("last_generated"),
    )
    ui = info["upsampler"]
    if ui is not None:
        weights = {k[3:]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("up/")}
        run.upsampler = UpsamplerParams(weights, ui["vec_len"], ui["n_patch"], ui["r_c"], ui["r_d"], ui.get("bounded", True))
        run.up_opt = ck.unpack_optimizer("up_opt", info["up_opt"], tensors)
    return run, info["extra"]
