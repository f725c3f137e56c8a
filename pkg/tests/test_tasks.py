import numpy as np
import pytest
from hypothesis import given, strategies as st

from atu.tasks import (
    DEFAULT_RANGES,
    DOMAIN_PRESETS,
    ClassPool,
    DomainRanges,
    SineParams,
    Task,
    domain_ranges,
    make_class_pools,
    query_grid,
    read_tasks,
    sample_meta_test_set,
    sample_sine_params,
    sample_sine_tasks,
    sample_synth_class_task,
    sine_task,
    task_to_vector,
    vector_to_task,
    write_tasks,
)


def test_sine_examples():
    p = SineParams(1.0, 1.0, 0.0)
    assert p(np.pi / 2) == 1.0
    assert p(0.0) == 0.0


def test_default_ranges_sanity():
    rng = np.random.default_rng(0)
    a = rng.uniform(*DEFAULT_RANGES.amplitude, size=100_000)
    amps = np.array([sample_sine_params(rng).amplitude for _ in range(20_000)])
    assert 0.1 <= amps.min() and amps.max() <= 5.0
    assert 0.1 <= a.min() and a.max() <= 5.0


def test_invalid_ranges_rejected():
    with pytest.raises(ValueError):
        DomainRanges(amplitude=(2.0, 1.0))
    with pytest.raises(ValueError):
        DomainRanges(phase=(0.0, np.inf))
    with pytest.raises(ValueError):
        domain_ranges("nope")


def test_vector_example_and_round_trip():
    t = Task(np.array([[2.0], [1.0]]), np.array([[5.0], [7.0]]), np.zeros((0, 1)), np.zeros((0, 1)))
    assert list(task_to_vector(t)) == [1.0, 7.0, 2.0, 5.0]
    v = task_to_vector(sample_sine_tasks(np.random.default_rng(0), 1, k_support=5, k_query=3)[0])
    assert np.array_equal(task_to_vector(vector_to_task(v, 5, 3)), v)
    with pytest.raises(ValueError):
        vector_to_task(np.zeros(7), 2, 2)
    with pytest.raises(ValueError):
        vector_to_task(np.zeros(8), 3, 3)


@given(st.integers(0, 2**31 - 1))
def test_vector_sorted_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    t = sample_sine_tasks(rng, 1, k_support=6, k_query=4)[0]
    # duplicate x with different y exercises the tie rule
    t.support_x[1] = t.support_x[0]
    t.support_y[1] = t.support_y[0] - 1.0
    v = task_to_vector(t)
    pairs = v.reshape(-1, 2)
    for block in (pairs[:6], pairs[6:]):
        assert np.all(np.diff(block[:, 0]) >= 0)
    p = rng.permutation(6)
    t2 = Task(t.support_x[p], t.support_y[p], t.query_x[::-1], t.query_y[::-1])
    assert np.array_equal(task_to_vector(t2), v)


def test_meta_test_set():
    g = query_grid(100)
    assert len(g) == 100 and g[0] == -5.0 and g[-1] == 5.0 and np.allclose(np.diff(g), 10 / 99)
    tasks = sample_meta_test_set(np.random.default_rng(0), DEFAULT_RANGES, 10, 100, 100)
    assert len(tasks) == 100
    for t in tasks:
        assert np.max(np.abs(t.query_y - t.params(t.query_x))) <= 1e-12
        assert t.k_support == 10


def test_task_stream_determinism():
    a = sample_sine_tasks(np.random.default_rng(3), 5)
    b = sample_sine_tasks(np.random.default_rng(3), 5)
    assert all(np.array_equal(task_to_vector(x), task_to_vector(y)) for x, y in zip(a, b))


def test_cross_domain_presets():
    d = DEFAULT_RANGES
    f, a, p = DOMAIN_PRESETS["frequency"], DOMAIN_PRESETS["amplitude"], DOMAIN_PRESETS["phase"]
    assert f.frequency[1] <= d.frequency[0]
    assert p.phase[1] <= d.phase[0]
    assert a.amplitude[0] == d.amplitude[1]
    for preset, name in ((f, "frequency"), (a, "amplitude"), (p, "phase")):
        for other in ("amplitude", "frequency", "phase"):
            if other != name:
                assert getattr(preset, other) == getattr(d, other)


def test_synth_class_task():
    base, _ = make_class_pools(np.random.default_rng(0), 12, 20, 4)
    t = sample_synth_class_task(np.random.default_rng(1), 2, 1, 1, base)
    assert t.k_support == 2 and t.k_query == 2
    t = sample_synth_class_task(np.random.default_rng(1), 5, 2, 3, base)
    assert set(t.support_y.tolist()) == set(range(5)) == set(t.query_y.tolist())
    pool = ClassPool(np.arange(12.0).reshape(6, 2), 0.0)
    t = sample_synth_class_task(np.random.default_rng(2), 3, 2, 2, pool)
    for x, y in zip(t.support_x, t.support_y):
        assert np.array_equal(x, pool.means[t.classes[y]])
    with pytest.raises(ValueError):
        sample_synth_class_task(np.random.default_rng(0), 7, 1, 1, pool)


def test_task_text_round_trip(tmp_path):
    tasks = sample_sine_tasks(np.random.default_rng(0), 4, k_support=3, k_query=2)
    write_tasks(tmp_path / "t.txt", tasks, "hello")
    back = read_tasks(tmp_path / "t.txt")
    assert [task_to_vector(t).tolist() for t in back] == [task_to_vector(t).tolist() for t in tasks]
