import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.stats import qmc

from gencdet import _kernels_py, kernels, mdn, nn
from gencdet.data import Dataset
from gencdet.errors import PreconditionError
from gencdet.mdn import MdnGenerator, MdnSpec, MinMaxMap, TrainingConfig


def constant_generator(raw, n_components, p, d=1, floor=1e-3):
    """Generator whose head output is ``raw`` at every covariate value."""
    spec = MdnSpec.build(p, d, n_components, (2,), sigma_floor=floor)
    params = nn.FnnParams(spec.backbone, np.zeros(spec.backbone.n_params))
    params.biases[-1][...] = raw
    unit = MinMaxMap(np.zeros(p), np.ones(p))
    return MdnGenerator(spec, params, unit, MinMaxMap(np.zeros(d), np.ones(d)))


def raw_scale(sigma, floor=1e-3):
    return math.log(math.expm1(sigma - floor))


def random_generator(seed, n_components, p, d=2):
    spec = MdnSpec.build(p, d, n_components, (6,), sigma_floor=0.05, seed=seed)
    params = nn.init_params(spec.backbone)
    params.flat[...] *= 0.5
    return MdnGenerator(spec, params, MinMaxMap(np.zeros(p), np.ones(p)), MinMaxMap(np.zeros(d), np.ones(d)))


def test_head_equal_logits_uniform():
    a, _, _ = mdn.head_transform(np.r_[np.full(3, 0.7), np.zeros(3), np.zeros(3)], 3, 1)
    assert np.allclose(a, 1 / 3)


def test_head_scale_floor():
    _, _, s = mdn.head_transform(np.array([0.0, 0.0, -1e6]), 1, 1, sigma_floor=1e-3)
    assert s[0] == 1e-3


def test_head_softmax_arithmetic():
    a, _, _ = mdn.head_transform(np.array([math.log(3), 0.0, 0.0, 0.0, 0.0, 0.0]), 2, 1)
    assert np.allclose(a, [0.75, 0.25], atol=1e-15)


def test_head_layout():
    raw = np.array([0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0])  # G=2, p=2
    _, mus, _ = mdn.head_transform(raw, 2, 2)
    assert np.array_equal(mus, [[1.0, 2.0], [3.0, 4.0]])


@given(st.lists(st.floats(-700, 700), min_size=12, max_size=12))
def test_head_simplex(raw):
    a, _, s = mdn.head_transform(np.array(raw), 4, 1, sigma_floor=1e-3)
    assert np.all(a >= 0) and abs(a.sum() - 1.0) < 1e-12
    assert np.all(s >= 1e-3)


def test_log_density_standard_normal():
    gen = constant_generator([0.0, 0.0, raw_scale(1.0)], 1, 1)
    assert math.exp(mdn.log_density(gen, [0.0], [0.3])) == pytest.approx(0.398942, abs=1e-6)


def test_log_density_identical_components():
    one = constant_generator([0.0, 0.4, raw_scale(0.7)], 1, 1)
    two = constant_generator([2.0, -1.0, 0.4, 0.4, raw_scale(0.7), raw_scale(0.7)], 2, 1)
    for y in (-1.0, 0.4, 2.5):
        assert mdn.log_density(one, [y], [0.0]) == pytest.approx(mdn.log_density(two, [y], [0.0]), abs=1e-12)


def test_log_density_two_components():
    gen = constant_generator([0.0, 0.0, -1.0, 1.0, raw_scale(1.0), raw_scale(1.0)], 2, 1)
    expected = 0.5 * stats.norm.pdf(-1) + 0.5 * stats.norm.pdf(1)
    assert mdn.density(gen, [0.0], [0.0]).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.241971, abs=1e-6)


def test_log_density_extreme_response_is_finite():
    gen = random_generator(0, 3, 2)
    for scale in (1e3, 1e6):
        assert np.isfinite(gen.log_density(np.full((1, 2), scale), np.zeros((1, 2)))).all()


@pytest.mark.parametrize("backend", [_kernels_py, kernels])
def test_gradient_of_head_loss(backend):
    rng = np.random.default_rng(4)
    raw = rng.normal(size=(5, 3 * 4))  # G=3, p=2
    y = rng.normal(size=(5, 2))
    _, g = backend.mdn_nll_grad(raw, y, 3, 1e-3)
    num = np.zeros_like(raw)
    for idx in np.ndindex(raw.shape):
        r = raw.copy()
        r[idx] += 1e-6
        fp = backend.mdn_nll_grad(r, y, 3, 1e-3)[0]
        r[idx] -= 2e-6
        fm = backend.mdn_nll_grad(r, y, 3, 1e-3)[0]
        num[idx] = (fp - fm) / 2e-6
    assert np.allclose(g, num, rtol=1e-5, atol=1e-6)


def test_backends_agree():
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(50, 8 * 3))
    y = rng.normal(size=(50, 1))
    lp, gp = _kernels_py.mdn_nll_grad(raw, y, 8, 1e-3)
    lc, gc = kernels.mdn_nll_grad(raw, y, 8, 1e-3)
    assert lp == pytest.approx(lc, rel=1e-12)
    assert np.allclose(gp, gc, rtol=1e-10, atol=1e-12)


def reference_epoch(params, x, y, perm, batch, n_comp, state):
    """Step-by-step epoch built from the network, head and optimizer pieces."""
    total = 0.0
    for start in range(0, len(perm) - batch + 1, batch):
        idx = perm[start : start + batch]
        raw, cache = nn.forward(params, x[idx], return_cache=True)
        loss, g = _kernels_py.mdn_nll_grad(raw, y[idx], n_comp, 1e-3)
        total += loss
        grad, _ = nn.backward(params, x[idx], g / batch, cache)
        nn.adam_step(params, grad, state)
    return total


@pytest.mark.parametrize("backend", [_kernels_py, kernels])
@pytest.mark.parametrize("p", [1, 2])
def test_train_epoch_matches_reference(backend, p):
    rng = np.random.default_rng(11)
    n_comp = 3
    spec = nn.FnnSpec(4, (7, 5), n_comp * (p + 2), seed=2)
    x, y = rng.uniform(size=(70, 4)), rng.uniform(size=(70, p))
    perm = rng.permutation(70)
    ref = nn.init_params(spec)
    flat = ref.flat.copy()
    state = nn.AdamState.for_params(ref)
    m1, m2 = np.zeros_like(flat), np.zeros_like(flat)
    step = 0
    for _ in range(2):
        want = reference_epoch(ref, x, y, perm, 16, n_comp, state)
        got, step, status = backend.mdn_train_epoch(
            flat, spec.layer_dims, spec.slope, x, y, perm, 16, n_comp, 1e-3, m1, m2, step, 1e-3, 0.9, 0.999, 1e-8
        )
        assert status == 0 and step == state.step
        assert got == pytest.approx(want, rel=1e-10)
        assert np.allclose(flat, ref.flat, rtol=1e-9, atol=1e-12)


def test_train_epoch_reports_divergence():
    spec = nn.FnnSpec(1, (2,), 3, seed=0)
    flat = nn.init_params(spec).flat
    x, y = np.zeros((4, 1)), np.full((4, 1), np.inf)
    for backend in (_kernels_py, kernels):
        f = flat.copy()
        args = (np.zeros_like(f), np.zeros_like(f), 0, 1e-3, 0.9, 0.999, 1e-8)
        with np.errstate(invalid="ignore"):
            _, _, status = backend.mdn_train_epoch(f, spec.layer_dims, spec.slope, x, y, np.arange(4), 4, 1, 1e-3, *args)
        assert status == 1
        assert np.array_equal(f, flat)


@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("seed", [1, 2])
def test_density_integrates_to_one(p, seed):
    gen = random_generator(seed, 3, p)
    x = np.random.default_rng(seed).uniform(size=(1, 2))
    _, mus, sig = gen.mixture(x)
    lo = (mus[0] - 8 * sig[0][:, None]).min(axis=0)
    hi = (mus[0] + 8 * sig[0][:, None]).max(axis=0)
    pts = qmc.scale(qmc.Sobol(p, seed=seed).random(2**17), lo, hi)[:100_000]
    dens = np.exp(gen.log_density(pts, np.repeat(x, len(pts), axis=0)))
    integral = dens.mean() * np.prod(hi - lo)
    assert abs(integral - 1.0) < 0.01


def test_sampler_matches_mixture_cdf():
    gen = random_generator(3, 3, 1)
    x = np.array([[0.4, 0.6]])
    a, mus, sig = gen.mixture(x)
    draws = gen.sample_batch(np.repeat(x, 10_000, axis=0), np.random.default_rng(0))[:, 0]

    def cdf(t):
        return np.sum(a[0] * stats.norm.cdf((t[:, None] - mus[0, :, 0]) / sig[0]), axis=1)

    assert stats.kstest(draws, cdf).statistic < 0.02


def test_sampler_standard_normal_ks():
    gen = constant_generator([0.0, 0.0, raw_scale(1.0)], 1, 1)
    draws = gen.sample_batch(np.zeros((100_000, 1)), np.random.default_rng(1))[:, 0]
    assert stats.kstest(draws, "norm").statistic < 0.006


def test_sampler_degenerate_scale_returns_mean():
    gen = constant_generator([0.0, 0.37, -1e6], 1, 1, floor=1e-12)
    assert mdn.sample(gen, [0.5], seed=3)[0] == pytest.approx(0.37, abs=1e-9)


def test_sample_deterministic():
    gen = random_generator(0, 2, 2)
    assert np.array_equal(mdn.sample(gen, [0.1, 0.2], 9), mdn.sample(gen, [0.1, 0.2], 9))


def test_generate_dataset_passes_covariates():
    gen = random_generator(0, 2, 1)
    cov = np.random.default_rng(0).normal(size=(20, 2))
    a = mdn.generate_dataset(gen, cov, 1)
    b = mdn.generate_dataset(gen, cov, 2)
    assert np.array_equal(a.x, cov) and np.array_equal(b.x, cov)
    assert not np.array_equal(a.y, b.y)


def test_generate_dataset_empty():
    gen = random_generator(0, 2, 1)
    out = mdn.generate_dataset(gen, np.empty((0, 2)), 0)
    assert out.n == 0 and out.p == 1


def test_train_requires_batch():
    data = Dataset(np.zeros((10, 1)), np.random.default_rng(0).normal(size=(10, 2)))
    with pytest.raises(PreconditionError):
        mdn.train(data, MdnSpec.build(1, 2), seed=0)


def test_train_constant_column_warns():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(size=300), np.ones(300)])
    data = Dataset(rng.normal(size=300), x)
    spec = MdnSpec.build(1, 2, 1, (4,), training=TrainingConfig(max_epochs=3))
    with pytest.warns(RuntimeWarning, match="constant"):
        mdn.train(data, spec, seed=0)


def test_train_recovers_unit_variance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 2))
    data = Dataset(rng.normal(size=5000), x)
    gen = mdn.train(data, MdnSpec.build(1, 2, 1, (8, 4)), seed=1)
    _, _, sig = gen.mixture(gen.x_map(x[:1000]))
    sigma = sig[:, 0].mean() * gen.y_map.scale[0]
    assert 0.9 <= sigma <= 1.1
    checkpoints = gen.summary.checkpoint_nll
    assert all(b <= a for a, b in zip(checkpoints, checkpoints[1:]))


def test_train_model_one_conditional_mean():
    rng = np.random.default_rng(2)
    beta = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
    x = rng.normal(size=(1000, 5))
    data = Dataset(x @ beta + rng.normal(size=1000), x)
    gen = mdn.train(data, MdnSpec.build(1, 5, 2, (8, 4)), seed=0)
    xt = rng.normal(size=(2000, 5))
    assert np.abs(gen.conditional_mean(xt)[:, 0] - xt @ beta).mean() < 0.15


def test_train_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 2))
    data = Dataset(x[:, :1] + rng.normal(size=(300, 1)), x)
    spec = MdnSpec.build(1, 2, 2, (4,), training=TrainingConfig(max_epochs=20))
    a, b = mdn.train(data, spec, seed=5), mdn.train(data, spec, seed=5)
    assert np.array_equal(a.params.flat, b.params.flat)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 3))
    data = Dataset(np.column_stack([x[:, 0], x[:, 1] ** 2]) + rng.normal(size=(400, 2)), x)
    gen = mdn.train(data, MdnSpec.build(2, 3, 2, (8,), training=TrainingConfig(max_epochs=10)), seed=0)
    path = tmp_path / "gen.npz"
    gen.save(path)
    back = MdnGenerator.load(path)
    ys, xs = rng.uniform(size=(1000, 2)), rng.uniform(size=(1000, 3))
    assert np.allclose(gen.log_density(ys, xs), back.log_density(ys, xs), rtol=0, atol=1e-12)
    assert back.spec == gen.spec
