"""Backpropagation through time, RMSProp, initializers, and the
stochastic orthogonality penalty.

Gradients are plain dicts keyed exactly like ``params.arrays()``. The
reverse passes are exact: they consume the cached forward trace (clip
rescale factors are treated as constants) and are verified against central
finite differences by :func:`grad_check`.

``normalize_by_T`` rescales the loss gradient injected at each hidden
state by 1/T (T = number of steps) before it enters the recurrent
accumulation; decoder gradients are left untouched. The alternative
reading - scale the finished hidden-path parameter gradients by 1/T -
is available as ``normalize_variant="param-scale"`` in the experiment
runner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .linalg import nearest_orthogonal, sample_unit_sphere
from .models import (
    ForwardTrace,
    LstmParams,
    LtRnnParams,
    PooledLtRnnParams,
    SRnnParams,
    chain_through_nonlinearity,
    forward,
    nonlinearity_deriv,
    sequence_loss,
)

__all__ = [
    "backward",
    "backward_batch",
    "output_gradient",
    "RmsPropState",
    "rmsprop_init",
    "rmsprop_step",
    "init_transition",
    "ortho_penalty_loss",
    "ortho_penalty_step",
    "GradCheckReport",
    "grad_check",
    "standard_params",
]

Gradients = dict[str, np.ndarray]


# --- loss gradients ---------------------------------------------------------

def _copy_output_grad(y: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean per-step cross-entropy)/dy: (softmax - onehot) / (T * B)."""
    T, B, M = y.shape
    z = y - y.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    idx = np.asarray(targets, dtype=np.int64).reshape(T, B) - 1
    p[np.arange(T)[:, None], np.arange(B)[None, :], idx] -= 1.0
    return p / (T * B)


def _adding_output_grad(y: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean final-step squared error)/dy."""
    T, B, M = y.shape
    dy = np.zeros_like(y)
    dy[-1, :, 0] = 2.0 * (y[-1, :, 0] - np.asarray(targets, dtype=np.float64)) / B
    return dy


def output_gradient(trace: ForwardTrace, sample) -> np.ndarray:
    """(T, B, M) gradient of the task loss w.r.t. the outputs, single sample."""
    if trace.batch != 1:
        raise ValueError("output_gradient expects a single-sample trace")
    if isinstance(sample, tasks.AddingSample):
        return _adding_output_grad(trace.y, np.array([sample.target]))
    if isinstance(sample, tasks.CopySample):
        return _copy_output_grad(trace.y, sample.targets[:, None])
    raise TypeError(f"unknown sample type {type(sample).__name__}")


# --- reverse passes ---------------------------------------------------------

def _backward_linear_transition(params, trace, dy, normalize_by_T, pooled):
    T, B, d = trace.pre.shape
    x2 = trace.inputs.reshape(T * B, -1)
    h_now = trace.h[1:].reshape(T * B, d)
    h_prev = trace.h[:-1].reshape(T * B, d)
    dy2 = dy.reshape(T * B, -1)
    grads: Gradients = {}
    if pooled:
        dp = trace.pooled.reshape(T * B, -1)
        grads["W_I"] = dy2.T @ h_now
        grads["W_P"] = dy2.T @ dp
        inj = (dy2 @ params.W_I).reshape(T, B, d)
        dpool = (dy2 @ params.W_P).reshape(*trace.pooled.shape)
        # radius gradient: h / pool within each group; subgradient 0 at radius 0
        ratio = np.divide(dpool, trace.pooled,
                          out=np.zeros_like(dpool), where=trace.pooled > 0.0)
        inj = inj + np.repeat(ratio, params.pool, axis=2) * trace.h[1:]
    else:
        grads["W"] = dy2.T @ h_now
        inj = (dy2 @ params.W).reshape(T, B, d)
    if normalize_by_T:
        inj = inj / T
    delta = np.empty((T, B, d))
    carry = np.zeros((B, d))
    V = params.V
    scale = trace.clip_scale
    for t in range(T - 1, -1, -1):
        np.add(inj[t], carry, out=delta[t])
        if scale is not None:
            delta[t] *= scale[t][:, None]
        carry = delta[t] @ V
    dpre = chain_through_nonlinearity(params.nonlinearity, trace.pre, delta)
    dpre2 = dpre.reshape(T * B, d)
    grads["U"] = dpre2.T @ x2
    grads["V"] = delta.reshape(T * B, d).T @ h_prev
    grads["b"] = dpre2.sum(axis=0)
    return grads


def _backward_srnn(params, trace, dy, normalize_by_T):
    T, B, d = trace.pre.shape
    x2 = trace.inputs.reshape(T * B, -1)
    h_now = trace.h[1:].reshape(T * B, d)
    h_prev = trace.h[:-1].reshape(T * B, d)
    dy2 = dy.reshape(T * B, -1)
    grads: Gradients = {"W": dy2.T @ h_now}
    inj = (dy2 @ params.W).reshape(T, B, d)
    if normalize_by_T:
        inj = inj / T
    deriv = nonlinearity_deriv(params.nonlinearity, trace.pre)
    dz = np.empty((T, B, d))
    carry = np.zeros((B, d))
    V = params.V
    scale = trace.clip_scale
    for t in range(T - 1, -1, -1):
        dt = inj[t] + carry
        if scale is not None:
            dt = dt * scale[t][:, None]
        dz[t] = dt * deriv[t]
        carry = dz[t] @ V
    dz2 = dz.reshape(T * B, d)
    grads["U"] = dz2.T @ x2
    grads["V"] = dz2.T @ h_prev
    grads["b"] = dz2.sum(axis=0)
    return grads


def _backward_lstm(params, trace, dy, normalize_by_T):
    T, B, _ = trace.inputs.shape
    d = params.hidden
    x2 = trace.inputs.reshape(T * B, -1)
    h_prev2 = trace.h[:-1].reshape(T * B, d)
    c_prev2 = trace.c[:-1].reshape(T * B, d)
    dy2 = dy.reshape(T * B, -1)
    grads: Gradients = {"W": dy2.T @ trace.h[1:].reshape(T * B, d)}
    inj = (dy2 @ params.W).reshape(T, B, d)
    if normalize_by_T:
        inj = inj / T
    v4 = np.concatenate([params.V_i, params.V_f, params.V_o, params.V_g], axis=0)
    p4 = None
    if params.peephole:
        p4 = np.concatenate([params.P_i, params.P_f, params.P_o, params.P_g], axis=0)
    gi, gf, go, gg = (trace.gates[k] for k in ("i", "f", "o", "g"))
    dp_all = np.empty((T, B, 4 * d))
    carry_h = np.zeros((B, d))
    carry_c = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        dh = inj[t] + carry_h
        i, f, o, g = gi[t], gf[t], go[t], gg[t]
        tc = np.tanh(trace.c[t + 1])
        dpo = dh * tc * o * (1.0 - o)
        dc = carry_c + dh * o * (1.0 - tc * tc)
        dpi = dc * g * i * (1.0 - i)
        dpf = dc * trace.c[t] * f * (1.0 - f)
        dpg = dc * i * (1.0 - g * g)
        dp4 = np.concatenate([dpi, dpf, dpo, dpg], axis=1)
        dp_all[t] = dp4
        carry_h = dp4 @ v4
        carry_c = dc * f
        if p4 is not None:
            carry_c = carry_c + dp4 @ p4
    dp2 = dp_all.reshape(T * B, 4 * d)
    du4 = dp2.T @ x2
    dv4 = dp2.T @ h_prev2
    db4 = dp2.sum(axis=0)
    for j, gate in enumerate(("i", "f", "o", "g")):
        sl = slice(j * d, (j + 1) * d)
        grads[f"U_{gate}"] = du4[sl]
        grads[f"V_{gate}"] = dv4[sl]
        grads[f"b_{gate}"] = db4[sl]
    if params.peephole:
        dpp4 = dp2.T @ c_prev2
        for j, gate in enumerate(("i", "f", "o", "g")):
            grads[f"P_{gate}"] = dpp4[j * d : (j + 1) * d]
    return grads


def _dispatch_backward(params, trace, dy, normalize_by_T):
    if isinstance(params, PooledLtRnnParams):
        if trace.kind != "pooled":
            raise ValueError(f"trace kind {trace.kind!r} does not match pooled params")
        return _backward_linear_transition(params, trace, dy, normalize_by_T, pooled=True)
    if isinstance(params, LstmParams):
        if trace.kind != "lstm":
            raise ValueError(f"trace kind {trace.kind!r} does not match lstm params")
        return _backward_lstm(params, trace, dy, normalize_by_T)
    if isinstance(params, SRnnParams):
        if trace.kind != "srnn":
            raise ValueError(f"trace kind {trace.kind!r} does not match srnn params")
        return _backward_srnn(params, trace, dy, normalize_by_T)
    if isinstance(params, LtRnnParams):
        if trace.kind != "ltrnn":
            raise ValueError(f"trace kind {trace.kind!r} does not match ltrnn params")
        return _backward_linear_transition(params, trace, dy, normalize_by_T, pooled=False)
    raise TypeError(f"unknown parameter bundle {type(params).__name__}")


def backward(params, trace: ForwardTrace, sample, normalize_by_T: bool = False) -> Gradients:
    """Exact gradients of the task loss for one sample.

    The trace must come from the matching forward pass on the same sample.
    """
    dy = output_gradient(trace, sample)
    return _dispatch_backward(params, trace, dy, normalize_by_T)


def backward_batch(params, trace: ForwardTrace, task: str, targets,
                   normalize_by_T: bool = False) -> Gradients:
    """Gradients of the batch-mean loss; ``task`` is "copy" or "adding".

    ``targets`` is (T, B) ids for copy, (B,) reals for adding. Equivalent
    to averaging per-sample ``backward`` results (exercised in tests), in
    one pass.
    """
    if task == "copy":
        dy = _copy_output_grad(trace.y, targets)
    elif task == "adding":
        dy = _adding_output_grad(trace.y, targets)
    else:
        raise ValueError(f"unknown task {task!r}")
    return _dispatch_backward(params, trace, dy, normalize_by_T)


# --- optimizer --------------------------------------------------------------

@dataclass
class RmsPropState:
    """Running mean-square cache per parameter, plus the fixed step sizes."""

    learning_rate: float
    decay: float = 0.9
    epsilon: float = 1e-8
    cache: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def rmsprop_init(params, learning_rate: float, decay: float = 0.9,
                 epsilon: float = 1e-8) -> RmsPropState:
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must be in (0, 1), got {decay}")
    cache = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    return RmsPropState(learning_rate=learning_rate, decay=decay,
                        epsilon=epsilon, cache=cache)


def rmsprop_step(state: RmsPropState, params, grads: Gradients):
    """cache <- decay*cache + (1-decay)*g^2; theta <- theta - lr*g/(sqrt(cache)+eps).

    Parameters and cache are updated in place; the pair is also returned.
    """
    arrays = params.arrays()
    if set(grads) != set(arrays):
        raise ValueError("gradient keys do not match parameter keys")
    for name, g in grads.items():
        cache = state.cache[name]
        if cache.shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        with np.errstate(over="ignore", invalid="ignore"):
            cache *= state.decay
            cache += (1.0 - state.decay) * g * g
            update = state.learning_rate * g / (np.sqrt(cache) + state.epsilon)
        if not np.isfinite(update).all():
            raise FloatingPointError(f"non-finite update for parameter {name!r}")
        arrays[name] -= update
    state.step += 1
    return params, state


# --- initializers and the orthogonality penalty ------------------------------

def init_transition(mode: str, d: int, rng: np.random.Generator) -> np.ndarray:
    """Transition matrix initializer.

    "gaussian" draws entries N(0, 1/sqrt(d)); "orthogonal" projects that
    draw to its nearest orthogonal matrix (singular values set to 1);
    "identity" is the identity.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if mode == "identity":
        return np.eye(d)
    if mode not in ("orthogonal", "gaussian"):
        raise ValueError(f"unknown transition init {mode!r}")
    draw = rng.standard_normal((d, d)) * d ** -0.25
    if mode == "gaussian":
        return draw
    return nearest_orthogonal(draw)


def ortho_penalty_loss(V: np.ndarray, points: np.ndarray) -> float:
    """Mean of ||(V^T V - I) x||^2 over the given unit points (rows)."""
    a = V.T @ V - np.eye(V.shape[0])
    u = points @ a
    return float((u * u).sum() / len(points))


def ortho_penalty_step(V: np.ndarray, m: int, step_size: float,
                       rng: np.random.Generator) -> np.ndarray:
    """One gradient step on the soft orthogonality penalty.

    The loss is the mean of ||(V^T V - I) x||^2 over m fresh points from
    the unit sphere; its gradient is (2/m) V sum_i (x_i u_i^T + u_i x_i^T)
    with u_i = (V^T V - I) x_i. An orthogonal V is a fixed point.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValueError("penalty step needs a square matrix")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    x = sample_unit_sphere(V.shape[0], m, rng)
    a = V.T @ V - np.eye(V.shape[0])
    u = x @ a
    grad = (2.0 / m) * V @ (x.T @ u + u.T @ x)
    return V - step_size * grad


# --- finite-difference gradient checking ------------------------------------

@dataclass
class GradCheckReport:
    architecture: str
    per_param: dict[str, float]
    max_rel_err: float
    tolerance: float
    status: str  # "pass" | "fail" | "skipped-nonsmooth"

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _trace_is_smooth(params, trace, kink_tol=1e-6) -> bool:
    if getattr(params, "nonlinearity", None) == "relu" and trace.pre is not None:
        if np.abs(trace.pre).min() < kink_tol:
            return False
    if trace.pooled is not None and trace.pooled.min() < kink_tol:
        return False
    return True


def grad_check(params, sample, tolerance: float = 1e-4, fd_step: float = 1e-5,
               clip_l: float | None = None) -> GradCheckReport:
    """Compare backward() against central finite differences, entry by entry.

    Relative error uses a 1e-5 floor in the denominator so the comparison
    degrades gracefully to an absolute test for near-zero entries. Traces
    that sit within 1e-6 of a non-differentiable point (a ReLU kink or a
    zero-radius pool) are reported as "skipped-nonsmooth" rather than
    pass/fail, since finite differences are not trustworthy there.
    """
    if isinstance(sample, tasks.AddingSample):
        inputs = tasks.encode_adding_inputs(sample)
    elif isinstance(sample, tasks.CopySample):
        inputs = tasks.encode_copy_inputs(sample, int(np.max(sample.inputs)) - 2)
    else:
        raise TypeError(f"unknown sample type {type(sample).__name__}")

    def loss() -> float:
        return sequence_loss(forward(params, inputs, clip_l), sample)

    trace = forward(params, inputs, clip_l)
    smooth = _trace_is_smooth(params, trace)
    analytic = backward(params, trace, sample, normalize_by_T=False)

    per_param: dict[str, float] = {}
    for name, arr in params.arrays().items():
        flat = arr.ravel()
        g_flat = analytic[name].ravel()
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + fd_step
            up = loss()
            flat[i] = saved - fd_step
            down = loss()
            flat[i] = saved
            fd = (up - down) / (2.0 * fd_step)
            denom = max(abs(fd), abs(g_flat[i]), 1e-5)
            worst = max(worst, abs(fd - g_flat[i]) / denom)
        per_param[name] = worst
    max_err = max(per_param.values())
    if not smooth:
        status = "skipped-nonsmooth"
    else:
        status = "pass" if max_err < tolerance else "fail"
    return GradCheckReport(architecture=params.kind, per_param=per_param,
                           max_rel_err=max_err, tolerance=tolerance, status=status)


def standard_params(architecture: str, n_in: int, hidden: int, n_out: int,
                    rng: np.random.Generator, nonlinearity: str = "tanh",
                    transition: str = "gaussian", pool: int = 2,
                    peephole: bool = False, scale: float = 0.5):
    """Small random parameter bundle for checks and smoke tests.

    Weights are N(0, scale^2/fan_in); biases are small Gaussians so ReLU
    pre-activations stay away from the kink with overwhelming probability.
    """
    def w(rows, cols):
        return rng.standard_normal((rows, cols)) * (scale / np.sqrt(cols))

    if architecture in ("ltrnn", "srnn"):
        cls = LtRnnParams if architecture == "ltrnn" else SRnnParams
        if transition == "gaussian":
            v = w(hidden, hidden)
        else:
            v = init_transition(transition, hidden, rng)
        return cls(U=w(hidden, n_in), V=v, b=0.1 * rng.standard_normal(hidden),
                   W=w(n_out, hidden), nonlinearity=nonlinearity)
    if architecture == "pooled":
        return PooledLtRnnParams(U=w(hidden, n_in), V=w(hidden, hidden),
                                 b=0.1 * rng.standard_normal(hidden),
                                 W_I=w(n_out, hidden), W_P=w(n_out, hidden // pool),
                                 pool=pool, nonlinearity=nonlinearity)
    if architecture == "lstm":
        kw = {}
        for gate in ("i", "f", "o", "g"):
            kw[f"U_{gate}"] = w(hidden, n_in)
            kw[f"V_{gate}"] = w(hidden, hidden)
            kw[f"b_{gate}"] = 0.1 * rng.standard_normal(hidden)
        kw["W"] = w(n_out, hidden)
        if peephole:
            for gate in ("i", "f", "o", "g"):
                kw[f"P_{gate}"] = w(hidden, hidden)
        return LstmParams(**kw)
    raise ValueError(f"unknown architecture {architecture!r}")
