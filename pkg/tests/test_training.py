import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from ornnlab.linalg import eigenvalue_phases, make_rng, spectral_norm
from ornnlab.mechanisms import build_adding_mechanism
from ornnlab.models import (
    LtRnnParams,
    PooledLtRnnParams,
    forward,
    ltrnn_forward,
)
from ornnlab.tasks import (
    AddingConfig,
    CopyConfig,
    encode_adding_inputs,
    encode_copy_inputs,
    gen_adding,
    gen_copy,
)
from ornnlab.training import (
    backward,
    backward_batch,
    grad_check,
    init_transition,
    ortho_penalty_loss,
    ortho_penalty_step,
    rmsprop_init,
    rmsprop_step,
    standard_params,
)


def _copy_pair(rng, K=3, S=2, T=20):
    cfg = CopyConfig(K=K, S=S, T=T)
    s = gen_copy(cfg, rng)
    return cfg, s


def test_bptt_ltrnn_copy_matches_finite_differences():
    rng = make_rng(0)
    _, s = _copy_pair(rng)
    p = standard_params("ltrnn", 5, 8, 5, rng, nonlinearity="tanh")
    rep = grad_check(p, s, tolerance=1e-4)
    assert rep.passed, rep.per_param


def test_bptt_lstm_peephole_adding_matches_finite_differences():
    rng = make_rng(1)
    s = gen_adding(AddingConfig(T=15), rng)
    p = standard_params("lstm", 2, 6, 1, rng, peephole=True)
    rep = grad_check(p, s, tolerance=1e-4)
    assert rep.passed, rep.per_param


def test_bptt_srnn_and_pooled_match_finite_differences():
    rng = make_rng(2)
    _, s = _copy_pair(rng)
    for arch in ("srnn", "pooled"):
        p = standard_params(arch, 5, 8, 5, rng, nonlinearity="tanh")
        rep = grad_check(p, s, tolerance=1e-4)
        assert rep.passed, (arch, rep.per_param)


def test_bptt_relu_away_from_kinks():
    rng = make_rng(3)
    s = gen_adding(AddingConfig(T=12), rng)
    p = standard_params("ltrnn", 2, 6, 1, rng, nonlinearity="relu")
    rep = grad_check(p, s, tolerance=1e-4)
    assert rep.status in ("pass", "skipped-nonsmooth")
    if rep.status == "pass":
        assert rep.max_rel_err < 1e-4


def test_bptt_with_clip_active_uses_constant_scale():
    # the rescale factor is treated as a constant in backward, so the
    # gradients must match finite differences of a surrogate forward that
    # applies the base trace's scale factors as fixed numbers
    rng = make_rng(4)
    s = gen_adding(AddingConfig(T=10), rng)
    x = encode_adding_inputs(s)
    p = standard_params("ltrnn", 2, 6, 1, rng, nonlinearity="tanh", scale=1.5)
    base = forward(p, x, 0.8)
    assert np.any(base.clip_scale < 1.0)  # clipping engaged
    scales = base.clip_scale[:, 0]

    def fixed_scale_loss(q):
        h = np.zeros(q.hidden)
        for t in range(x.shape[0]):
            h = np.tanh(q.U @ x[t] + q.b) + q.V @ h
            h = h * scales[t]
        y = float((q.W @ h)[0])
        return (y - s.target) ** 2

    analytic = backward(p, base, s)
    eps = 1e-6
    for name, arr in p.arrays().items():
        flat = arr.ravel()
        g = analytic[name].ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = fixed_scale_loss(p)
            flat[i] = saved - eps
            down = fixed_scale_loss(p)
            flat[i] = saved
            fd = (up - down) / (2 * eps)
            assert abs(fd - g[i]) < 1e-6 * max(1.0, abs(fd)), (name, i)


def test_zero_loss_configuration_has_zero_gradients():
    p = build_adding_mechanism()
    s = gen_adding(AddingConfig(T=50), make_rng(5))
    trace = ltrnn_forward(p, encode_adding_inputs(s))
    grads = backward(p, trace, s)
    for name, g in grads.items():
        assert np.abs(g).max() < 1e-12, name


def test_backward_batch_matches_mean_of_singles():
    rng = make_rng(6)
    cfg, _ = _copy_pair(rng, T=10)
    samples = [gen_copy(cfg, rng) for _ in range(4)]
    p = standard_params("ltrnn", 5, 6, 5, rng, nonlinearity="tanh")
    xs = np.stack([encode_copy_inputs(s, cfg.K) for s in samples], axis=1)
    targets = np.stack([s.targets for s in samples], axis=1)
    batch_grads = backward_batch(p, forward(p, xs), "copy", targets)
    mean_grads = None
    for s in samples:
        tr = forward(p, encode_copy_inputs(s, cfg.K))
        g = backward(p, tr, s)
        if mean_grads is None:
            mean_grads = {k: v / len(samples) for k, v in g.items()}
        else:
            for k, v in g.items():
                mean_grads[k] += v / len(samples)
    for k in batch_grads:
        npt.assert_allclose(batch_grads[k], mean_grads[k], atol=1e-12)


def test_normalization_scales_hidden_paths_only():
    # adding task injects loss at a single step, so every hidden-path
    # gradient scales by exactly 1/T while the decoder gradient is untouched
    rng = make_rng(7)
    s = gen_adding(AddingConfig(T=25), rng)
    p = standard_params("ltrnn", 2, 6, 1, rng, nonlinearity="tanh")
    tr = forward(p, encode_adding_inputs(s))
    plain = backward(p, tr, s, normalize_by_T=False)
    scaled = backward(p, tr, s, normalize_by_T=True)
    for name in ("U", "V", "b"):
        npt.assert_allclose(scaled[name], plain[name] / 25.0, rtol=1e-12)
    npt.assert_allclose(scaled["W"], plain["W"], rtol=0, atol=0)


def test_backward_rejects_mismatched_trace():
    rng = make_rng(8)
    s = gen_adding(AddingConfig(T=5), rng)
    lt = standard_params("ltrnn", 2, 4, 1, rng)
    sr = standard_params("srnn", 2, 4, 1, rng)
    tr = forward(lt, encode_adding_inputs(s))
    with pytest.raises(ValueError):
        backward(sr, tr, s)


def test_rmsprop_scalar_example():
    p = LtRnnParams(U=np.array([[1.0]]), V=np.array([[0.0]]), b=np.zeros(1),
                    W=np.array([[0.0]]))
    state = rmsprop_init(p, learning_rate=0.1)
    before = p.U.copy()
    rmsprop_step(state, p, {"U": np.array([[1.0]]), "V": np.zeros((1, 1)),
                            "b": np.zeros(1), "W": np.zeros((1, 1))})
    assert abs(state.cache["U"][0, 0] - 0.1) < 1e-12
    assert abs(abs(p.U[0, 0] - before[0, 0]) - 0.31623) < 1e-4


def test_rmsprop_zero_gradient_decays_cache():
    p = LtRnnParams(U=np.ones((2, 2)), V=np.zeros((2, 2)), b=np.zeros(2),
                    W=np.zeros((1, 2)))
    state = rmsprop_init(p, learning_rate=0.5)
    state.cache["U"][:] = 1.0
    zeros = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    rmsprop_step(state, p, zeros)
    npt.assert_array_equal(p.U, np.ones((2, 2)))
    npt.assert_allclose(state.cache["U"], 0.9)


def test_rmsprop_deterministic():
    rng = make_rng(9)
    grads = {"U": rng.standard_normal((3, 2)), "V": rng.standard_normal((3, 3)),
             "b": rng.standard_normal(3), "W": rng.standard_normal((1, 3))}
    outs = []
    for _ in range(2):
        p = standard_params("ltrnn", 2, 3, 1, make_rng(10))
        state = rmsprop_init(p, learning_rate=0.01)
        rmsprop_step(state, p, grads)
        rmsprop_step(state, p, grads)
        outs.append(p.U.copy())
    npt.assert_array_equal(outs[0], outs[1])


def test_rmsprop_lr_zero_is_identity():
    p = standard_params("ltrnn", 2, 3, 1, make_rng(11))
    before = {k: v.copy() for k, v in p.arrays().items()}
    state = rmsprop_init(p, learning_rate=0.0)
    rmsprop_step(state, p, {k: np.ones_like(v) for k, v in p.arrays().items()})
    for k, v in p.arrays().items():
        npt.assert_array_equal(v, before[k])


def test_rmsprop_nonfinite_update_reports_name():
    p = standard_params("ltrnn", 2, 3, 1, make_rng(12))
    grads = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    grads["V"][0, 0] = np.inf
    state = rmsprop_init(p, learning_rate=0.1)
    with pytest.raises(FloatingPointError, match="V"):
        rmsprop_step(state, p, grads)


def test_init_transition_identity_and_orthogonal():
    npt.assert_array_equal(init_transition("identity", 128, make_rng(13)), np.eye(128))
    v = init_transition("orthogonal", 80, make_rng(14))
    assert np.abs(v.T @ v - np.eye(80)).max() < 1e-10


def test_init_transition_gaussian_variance():
    d = 64
    draws = np.concatenate([init_transition("gaussian", d, make_rng(15, i)).ravel()
                            for i in range(3)])
    # target variance 1/sqrt(d)
    assert abs(draws.var() - d ** -0.5) < 0.005


def test_orthogonal_init_phases_uniform():
    pvals = []
    for i in range(5):
        v = init_transition("orthogonal", 64, make_rng(16, i))
        phases = eigenvalue_phases(v)
        upper = np.sort(np.abs(phases[phases.imag == 0.0] if False else phases))
        # fold conjugate pairs onto [0, pi] and test against uniform
        folded = np.abs(phases)
        pvals.append(stats.kstest(folded / np.pi, "uniform").pvalue)
    assert all(p > 0.001 for p in pvals)


def test_penalty_fixed_point_at_orthogonal():
    v = init_transition("orthogonal", 12, make_rng(17))
    out = ortho_penalty_step(v, m=20, step_size=1e-2, rng=make_rng(18))
    npt.assert_allclose(out, v, atol=1e-12)


def test_penalty_loss_at_two_i():
    from ornnlab.linalg import sample_unit_sphere
    pts = sample_unit_sphere(4, 30, make_rng(19))
    assert abs(ortho_penalty_loss(2.0 * np.eye(4), pts) - 9.0) < 1e-12


def test_penalty_gradient_matches_finite_differences():
    rng = make_rng(20)
    d, m = 5, 7
    v = rng.standard_normal((d, d))
    pts = rng.standard_normal((m, d))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    a = v.T @ v - np.eye(d)
    u = pts @ a
    grad = (2.0 / m) * v @ (pts.T @ u + u.T @ pts)
    eps = 1e-6
    for i in range(d):
        for j in range(d):
            vp, vm = v.copy(), v.copy()
            vp[i, j] += eps
            vm[i, j] -= eps
            fd = (ortho_penalty_loss(vp, pts) - ortho_penalty_loss(vm, pts)) / (2 * eps)
            assert abs(fd - grad[i, j]) < 1e-6


def test_penalty_drives_scaled_orthogonal_back():
    rng = make_rng(21)
    v = 1.5 * init_transition("orthogonal", 16, rng)
    pen_rng = make_rng(22)
    for _ in range(500):
        v = ortho_penalty_step(v, m=20, step_size=1e-2, rng=pen_rng)
    assert abs(spectral_norm(v) - 1.0) < 0.05


def test_penalty_never_increases_loss_for_small_steps():
    rng = make_rng(23)
    probe = make_rng(24)
    from ornnlab.linalg import sample_unit_sphere
    for trial in range(50):
        d = int(rng.integers(2, 24))
        v = rng.standard_normal((d, d))
        pts = sample_unit_sphere(d, 200, probe)
        before = ortho_penalty_loss(v, pts)
        v2 = ortho_penalty_step(v, m=50, step_size=1e-3, rng=probe)
        after = ortho_penalty_loss(v2, pts)
        assert after <= before + 1e-9, trial


def test_grad_check_detects_corruption():
    # the harness must flag a deliberately wrong gradient; negate one entry
    # by bolting a wrapper around backward via a corrupted parameter copy
    rng = make_rng(25)
    s = gen_adding(AddingConfig(T=8), rng)
    p = standard_params("ltrnn", 2, 4, 1, rng, nonlinearity="tanh")
    rep = grad_check(p, s, tolerance=1e-4)
    assert rep.passed
    tr = forward(p, encode_adding_inputs(s))
    good = backward(p, tr, s)
    bad = {k: v.copy() for k, v in good.items()}
    bad["V"][0, 0] = -bad["V"][0, 0] - 1.0
    worst = 0.0
    flat = p.V.ravel()
    g = bad["V"].ravel()
    eps = 1e-5
    from ornnlab.models import sequence_loss
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = sequence_loss(forward(p, encode_adding_inputs(s)), s)
        flat[i] = saved - eps
        down = sequence_loss(forward(p, encode_adding_inputs(s)), s)
        flat[i] = saved
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-5))
    assert worst > 1e-4


def test_grad_check_skips_dead_pool():
    # pool 0 is structurally zero: its encoder rows, bias, and the rotation
    # never feed it, so the radius sits exactly at the non-smooth point
    d = 4
    from ornnlab.linalg import block_rotation
    v = np.zeros((d, d))
    v[2:, 2:] = block_rotation([1], period=7)
    u = np.zeros((d, 2))
    u[2:, :] = make_rng(26).standard_normal((2, 2))
    p = PooledLtRnnParams(U=u, V=v, b=np.zeros(d), W_I=0.3 * np.ones((1, d)),
                          W_P=0.3 * np.ones((1, 2)), pool=2, nonlinearity="identity")
    s = gen_adding(AddingConfig(T=6), make_rng(27))
    rep = grad_check(p, s, tolerance=1e-4)
    assert rep.status == "skipped-nonsmooth"
