import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from ornnlab.linalg import make_rng
from ornnlab.tasks import (
    AddingConfig,
    CopyConfig,
    adding_baseline,
    adding_sample_from_line,
    adding_sample_to_line,
    copy_baseline,
    copy_sample_from_line,
    copy_sample_to_line,
    encode_adding_inputs,
    encode_copy_inputs,
    encode_one_hot,
    gen_adding,
    gen_adding_batch,
    gen_copy,
    gen_copy_batch,
)


def check_copy_invariants(config, inputs, targets, pos):
    L = config.length
    assert inputs.shape == (L,) and targets.shape == (L,)
    assert np.all((inputs[: config.S] >= 1) & (inputs[: config.S] <= config.K))
    assert inputs[pos] == config.delimiter
    assert np.count_nonzero(inputs == config.delimiter) == 1
    rest = np.delete(inputs, np.concatenate([np.arange(config.S), [pos]]))
    assert np.all(rest == config.blank)
    npt.assert_array_equal(targets[pos + 1 : pos + 1 + config.S], inputs[: config.S])
    mask = np.ones(L, dtype=bool)
    mask[pos + 1 : pos + 1 + config.S] = False
    assert np.all(targets[mask] == config.blank)


def test_copy_fixed_layout():
    cfg = CopyConfig(K=8, S=10, T=100)
    s = gen_copy(cfg, make_rng(0))
    assert s.inputs.size == 120
    assert s.delimiter_pos == 109  # the 110th step
    assert np.all(s.targets[:110] == cfg.blank)
    npt.assert_array_equal(s.targets[110:], s.inputs[:10])
    check_copy_invariants(cfg, s.inputs, s.targets, s.delimiter_pos)


def test_copy_smallest_instance():
    cfg = CopyConfig(K=2, S=1, T=2)
    s = gen_copy(cfg, make_rng(1))
    assert s.inputs.size == 4
    npt.assert_array_equal(s.targets, [cfg.blank, cfg.blank, cfg.blank, s.inputs[0]])


def test_copy_variable_delimiter_uniform():
    cfg = CopyConfig(K=4, S=10, T=100, variable_delimiter=True)
    rng = make_rng(2)
    counts = np.zeros(cfg.T, dtype=int)
    for _ in range(10000):
        s = gen_copy(cfg, rng)
        assert cfg.S <= s.delimiter_pos < cfg.S + cfg.T
        counts[s.delimiter_pos - cfg.S] += 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_copy_invariants_over_random_configs():
    rng = make_rng(3)
    for _ in range(300):
        cfg = CopyConfig(K=int(rng.integers(2, 10)), S=int(rng.integers(1, 8)),
                         T=int(rng.integers(2, 30)),
                         variable_delimiter=bool(rng.integers(0, 2)))
        for _ in range(34):
            s = gen_copy(cfg, rng)
            check_copy_invariants(cfg, s.inputs, s.targets, s.delimiter_pos)


def test_copy_batch_matches_invariants():
    cfg = CopyConfig(K=5, S=3, T=12, variable_delimiter=True)
    inputs, targets, pos = gen_copy_batch(cfg, make_rng(4), 200)
    for i in range(200):
        check_copy_invariants(cfg, inputs[i], targets[i], int(pos[i]))


def test_copy_generator_deterministic():
    cfg = CopyConfig(K=8, S=10, T=50, variable_delimiter=True)
    a = gen_copy(cfg, make_rng(5, 9))
    b = gen_copy(cfg, make_rng(5, 9))
    npt.assert_array_equal(a.inputs, b.inputs)
    npt.assert_array_equal(a.targets, b.targets)


def test_adding_target_is_marked_sum():
    cfg = AddingConfig(T=30)
    rng = make_rng(6)
    for _ in range(100):
        s = gen_adding(cfg, rng)
        j = np.flatnonzero(s.markers)
        assert j.size == 2
        assert s.target == s.values[j[0]] + s.values[j[1]]
        assert j[0] < cfg.T // 2 <= j[1]
        assert 0.0 <= s.target < 2.0


def test_adding_t2_markers_forced():
    s = gen_adding(AddingConfig(T=2), make_rng(7))
    npt.assert_array_equal(s.markers, [1, 1])


def test_adding_mean_target():
    _, _, targets = gen_adding_batch(AddingConfig(T=20), make_rng(8), 100000)
    assert abs(targets.mean() - 1.0) < 0.01


def test_adding_uniform_pair_scheme():
    cfg = AddingConfig(T=10, marker_scheme="uniform-pair")
    rng = make_rng(9)
    for _ in range(200):
        s = gen_adding(cfg, rng)
        assert np.flatnonzero(s.markers).size == 2


def test_one_hot():
    npt.assert_array_equal(encode_one_hot(3, 5), [0, 0, 1, 0, 0])
    npt.assert_array_equal(encode_one_hot(1, 1), [1])
    with pytest.raises(ValueError):
        encode_one_hot(6, 5)


def test_copy_baseline_values():
    assert abs(copy_baseline(CopyConfig(K=8, S=10, T=100)) - 10 * math.log(8) / 120) < 1e-12
    assert copy_baseline(CopyConfig(K=1, S=5, T=50)) == 0.0
    assert abs(copy_baseline(CopyConfig(K=8, S=10, T=500)) - 0.0399893) < 1e-6


def test_copy_baseline_matches_memoryless_predictor():
    # simulate the predictor the formula describes: certain blank off the
    # replay window, uniform over the K symbols inside it
    cfg = CopyConfig(K=8, S=10, T=100)
    rng = make_rng(10)
    losses = []
    for _ in range(50):
        s = gen_copy(cfg, rng)
        big = 50.0
        logits = np.full((cfg.length, cfg.num_classes), -big)
        logits[:, cfg.blank - 1] = big
        win = slice(s.delimiter_pos + 1, s.delimiter_pos + 1 + cfg.S)
        logits[win, :] = -big
        logits[win, : cfg.K] = 0.0
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        losses.append(-logp[np.arange(cfg.length), s.targets - 1].mean())
    assert abs(np.mean(losses) - copy_baseline(cfg)) < 1e-9


def test_adding_baseline_value_and_monte_carlo():
    assert abs(adding_baseline() - 1.0 / 6.0) < 1e-12
    _, _, targets = gen_adding_batch(AddingConfig(T=10), make_rng(11), 1000000)
    mse_of_one = ((targets - 1.0) ** 2).mean()
    assert abs(mse_of_one - adding_baseline()) < 0.001
    assert 0.0 < adding_baseline()  # predicting the truth scores 0, below chance


def test_encoders():
    cfg = CopyConfig(K=3, S=2, T=4)
    s = gen_copy(cfg, make_rng(12))
    x = encode_copy_inputs(s, cfg.K)
    assert x.shape == (8, 5)
    npt.assert_array_equal(x.sum(axis=1), np.ones(8))
    assert np.all(x[np.arange(8), s.inputs - 1] == 1.0)

    a = gen_adding(AddingConfig(T=6), make_rng(13))
    xa = encode_adding_inputs(a)
    assert xa.shape == (6, 2)
    npt.assert_array_equal(xa[:, 0], a.values)
    npt.assert_array_equal(xa[:, 1], a.markers)


def test_line_round_trip():
    cfg = CopyConfig(K=4, S=3, T=8, variable_delimiter=True)
    s = gen_copy(cfg, make_rng(14))
    cfg2, s2 = copy_sample_from_line(copy_sample_to_line(cfg, s))
    assert cfg2 == cfg
    npt.assert_array_equal(s2.inputs, s.inputs)
    npt.assert_array_equal(s2.targets, s.targets)
    assert s2.delimiter_pos == s.delimiter_pos

    acfg = AddingConfig(T=5)
    a = gen_adding(acfg, make_rng(15))
    acfg2, a2 = adding_sample_from_line(adding_sample_to_line(acfg, a))
    assert acfg2.T == acfg.T
    npt.assert_array_equal(a2.values, a.values)
    npt.assert_array_equal(a2.markers, a.markers)
    assert a2.target == a.target


def test_golden_lines():
    cfg = CopyConfig(K=2, S=1, T=2)
    s = gen_copy(cfg, make_rng(16))
    assert copy_sample_to_line(cfg, s) == "copy 2 1 2 0 2 2 3 4 3 3 3 3 2"
    a = gen_adding(AddingConfig(T=2), make_rng(17))
    line = adding_sample_to_line(AddingConfig(T=2), a)
    assert line.startswith("adding 2 ")
    assert line.split()[-2:] == ["1", "1"]


def test_config_validation():
    with pytest.raises(ValueError):
        CopyConfig(K=0, S=1, T=2)
    with pytest.raises(ValueError):
        CopyConfig(K=2, S=0, T=2)
    with pytest.raises(ValueError):
        CopyConfig(K=2, S=1, T=1)
    with pytest.raises(ValueError):
        AddingConfig(T=1)
    with pytest.raises(ValueError):
        AddingConfig(T=5, marker_scheme="bogus")
