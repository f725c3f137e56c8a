from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from atu import autodiff as ad
from atu.autodiff import Tensor
from atu.meta import init_model
from atu.tasks import sample_sine_tasks, tasks_to_matrix
from atu.upsampler import (
    AtuConfig,
    IsolationError,
    atu_loss_regression,
    atu_meta_train,
    build_patch,
    generated_fit_residual,
    init_upsampler,
    load_regression_run,
    new_regression_run,
    sample_noise,
    save_regression_run,
    sinusoid_residual,
    train_upsampler,
    upsample,
    upsample_vectors,
    upsampler_update,
)

SMALL = AtuConfig(encoder_widths=(16, 32), coarse_hidden=(32, 32), decoder_widths=(16, 16))
K = 5


def setup(cfg=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    params = init_upsampler(rng, 4 * K, cfg)
    gt = tasks_to_matrix(sample_sine_tasks(rng, cfg.n_ground_truth, k_support=K, k_query=K))
    return params, gt, sample_noise(rng, cfg), rng


def test_output_count():
    params, gt, noise, _ = setup()
    assert params.n_patch == 8 and params.n_out == 64
    out = upsample(params, sample_sine_tasks(np.random.default_rng(1), 8, k_support=K, k_query=K), noise, K, K)
    assert len(out) == 64


def test_zero_decoder_repeats_coarse_tasks():
    params, gt, noise, _ = setup()
    for k, w in params.weights.items():
        if k.startswith("gd/"):
            w.data = np.zeros_like(w.data)
    patch = gt[build_patch(gt, params.n_patch)]
    out = upsample_vectors(params, patch, noise).data.reshape(-1, params.r_d, params.vec_len)
    for c in range(out.shape[0]):
        assert np.array_equal(out[c], np.repeat(out[c, :1], params.r_d, axis=0))
    assert not np.array_equal(out[0, 0], out[1, 0])


@given(st.integers(0, 2**31 - 1))
def test_patch_permutation_invariance(seed):
    params, gt, noise, _ = setup()
    patch = gt[:8]
    p = np.random.default_rng(seed).permutation(8)
    assert np.array_equal(upsample_vectors(params, patch, noise).data, upsample_vectors(params, patch[p], noise).data)


def test_outputs_stay_inside_patch_ranges():
    params, gt, noise, _ = setup()
    for w in params.weights.values():
        w.data = w.data * 20.0
    patch = gt[build_patch(gt, params.n_patch)]
    pts = upsample_vectors(params, patch, noise).data.reshape(-1, 2)
    ref = patch.reshape(-1, 2)
    assert np.all(pts >= ref.min(axis=0)) and np.all(pts <= ref.max(axis=0))
    assert np.any(pts == ref.max(axis=0)) or np.any(pts == ref.min(axis=0))


def test_bounded_output_is_clamped_unbounded_output():
    cfg = replace(SMALL, bounded=False)
    params, gt, noise, _ = setup(cfg)
    patch = gt[build_patch(gt, params.n_patch)]
    raw = upsample_vectors(params, patch, noise).data
    params.bounded = True
    clipped = upsample_vectors(params, patch, noise).data
    ref = patch.reshape(-1, 2)
    lo, hi = np.tile(ref.min(axis=0), params.vec_len // 2), np.tile(ref.max(axis=0), params.vec_len // 2)
    assert np.array_equal(clipped, np.minimum(np.maximum(raw, lo), hi))


def test_shape_errors():
    params, gt, noise, _ = setup()
    with pytest.raises(ValueError):
        upsample_vectors(params, gt[:7], noise)
    with pytest.raises(ValueError):
        upsample_vectors(params, gt[:8], noise[:3])
    with pytest.raises(ValueError):
        AtuConfig(n_ground_truth=60).validate()
    with pytest.raises(ValueError):
        AtuConfig(aug_ratio=1.5).validate()


def loss_of(up_vectors, gt, cfg, model):
    """Loss terms with the generator output replaced by ``up_vectors``."""
    from atu import upsampler as U

    orig = U.upsample_vectors
    U.upsample_vectors = lambda params, patch, noise: Tensor(up_vectors, requires_grad=True)
    try:
        params, _, noise, _ = setup(cfg)
        return atu_loss_regression(params, gt[:8], noise, gt, model, cfg, K, K)[1]
    finally:
        U.upsample_vectors = orig


def test_loss_identities():
    model = init_model(np.random.default_rng(0))
    _, gt, _, _ = setup()
    cfg = AtuConfig(eta1=0, eta2=0, eta3=0, encoder_widths=(16, 32), coarse_hidden=(32, 32), decoder_widths=(16, 16))
    assert loss_of(gt, gt, cfg, model)["loss"] == 0.0
    # support block equal to the query block in every generated task: the coherence term is 0
    same = gt.copy().reshape(64, 2, 2 * K)
    same[:, 1] = same[:, 0]
    parts = loss_of(same.reshape(64, -1), gt, SMALL, model)
    assert parts["sq_emd"] == 0.0


def test_loss_rejects_wrong_ground_truth():
    params, gt, noise, _ = setup()
    model = init_model(np.random.default_rng(0))
    with pytest.raises(ValueError):
        atu_loss_regression(params, gt[:8], noise, gt[:32], model, SMALL, K, K)
    with pytest.raises(ValueError):
        atu_loss_regression(params, gt[:8], noise, gt, model, SMALL, K, K - 1)


def test_update_isolation_and_zero_iterations():
    params, gt, noise, rng = setup()
    model = init_model(np.random.default_rng(0))
    before = params.snapshot()
    train_upsampler(params, model, rng, SMALL, iters=0, k=K)
    assert all(np.array_equal(before[k], v) for k, v in params.snapshot().items())
    theta = model.snapshot()
    upsampler_update(params, ad.adam(), gt, noise, model, SMALL, K, K)
    assert all(np.array_equal(theta[k], v) for k, v in model.snapshot().items())
    assert any(not np.array_equal(before[k], v) for k, v in params.snapshot().items())


def test_isolation_violation_detected(monkeypatch):
    from atu import upsampler as U

    params, gt, noise, _ = setup()
    model = init_model(np.random.default_rng(0))
    real = U.atu_loss_regression

    def leaky(*a, **kw):
        model.params["b0"].data = model.params["b0"].data + 1.0
        return real(*a, **kw)

    monkeypatch.setattr(U, "atu_loss_regression", leaky)
    with pytest.raises(IsolationError):
        upsampler_update(params, ad.adam(), gt, noise, model, SMALL, K, K)


def test_training_reduces_emd():
    params, _, _, rng = setup()
    model = init_model(np.random.default_rng(0))
    hist = train_upsampler(params, model, rng, SMALL, iters=150, k=K, opt=ad.adam(3e-3))
    first = np.mean([h["emd"] for h in hist[:10]])
    last = np.mean([h["emd"] for h in hist[-10:]])
    assert last < first


def test_ratio_zero_is_vanilla_maml():
    cfg = AtuConfig(aug_ratio=0.0, max_iters=0)
    a = new_regression_run(3, cfg, k=K, with_upsampler=False)
    b = new_regression_run(3, cfg, k=K, with_upsampler=True)
    atu_meta_train(a, cfg, 2, K)
    atu_meta_train(b, cfg, 2, K)
    assert all(np.array_equal(a.model.snapshot()[k], v) for k, v in b.model.snapshot().items())


def test_tu_is_atu_with_zero_adversarial_weights():
    model = init_model(np.random.default_rng(0))
    params, gt, noise, _ = setup()
    tu = AtuConfig(eta1=0, eta2=0, encoder_widths=(16, 32), coarse_hidden=(32, 32), decoder_widths=(16, 16))
    loss, parts = atu_loss_regression(params, gt[:8], noise, gt, model, tu, K, K)
    assert parts["adv"] == 0.0
    assert parts["loss"] == pytest.approx(parts["emd"] + tu.eta3 * parts["sq_emd"], rel=1e-12)


def small_run(seed, cfg):
    return new_regression_run(seed, cfg, k=K, with_upsampler=True)


def test_training_loop_determinism_and_resume(tmp_path):
    cfg = AtuConfig(
        aug_ratio=0.4, max_iters=3, encoder_widths=(16, 32), coarse_hidden=(32, 32), decoder_widths=(16, 16)
    )
    a = small_run(1, cfg)
    atu_meta_train(a, cfg, 4, K)
    b = small_run(1, cfg)
    atu_meta_train(b, cfg, 4, K, stop_after=2)
    save_regression_run(tmp_path / "r.ckpt", b, {"note": 1})
    c, extra = load_regression_run(tmp_path / "r.ckpt")
    assert extra == {"note": 1} and c.iteration == 2
    atu_meta_train(c, cfg, 4, K)
    assert a.meta_losses == c.meta_losses
    for k, v in a.model.snapshot().items():
        assert np.array_equal(v, c.model.snapshot()[k])
    for k, v in a.upsampler.snapshot().items():
        assert np.array_equal(v, c.upsampler.snapshot()[k])
    assert np.array_equal(a.last_generated, c.last_generated)


def test_sinusoid_residual():
    x = np.linspace(-5, 5, 20)
    assert sinusoid_residual(x, 3.0 * np.sin(1.1 * x + 0.4)) < 1e-20
    noisy = np.random.default_rng(0).normal(size=20)
    assert sinusoid_residual(x, noisy) > 0.1
    coherent = np.concatenate([np.stack([x, np.sin(x)], 1).reshape(-1)] * 3).reshape(3, -1)
    assert generated_fit_residual(coherent, 10, 10) < 1e-20
