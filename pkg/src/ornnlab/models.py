"""Recurrent architectures with traces cached for exact backpropagation.

Four models share a (T, B, N) input layout (steps, batch, input dim); a
single sample is simply a batch of one, and 2-D (T, N) input is promoted
automatically.

* linear-transition RNN:  h_t = act(U x_t + b) + V h_{t-1},  y_t = W h_t.
  The nonlinearity touches only the input path, so the recurrence itself
  is linear and an orthogonal V preserves the hidden norm exactly.
* simple RNN:             h_t = act(U x_t + V h_{t-1} + b),  y_t = W h_t.
* LSTM: gates i, f, o and candidate g, each sigma/tanh of
  U_* x_t + V_* h_{t-1} + b_* (plus P_* c_{t-1} when peephole links are
  enabled, on all four pre-activations); c_t = f*c_{t-1} + i*g and
  h_t = o * tanh(c_t).
* pooled linear-transition RNN: the same recurrence as the first model,
  decoded through both the raw state and its l2-pooled radii:
  y_t = W_I h_t + W_P pool_k(h_t).

The linear-transition variants accept an optional activation ceiling
``clip_l``: whenever ||h_t|| exceeds it, h_t is rescaled to that norm and
the factor is recorded in the trace (the backward pass treats it as a
constant). With clipping inactive the trace is bit-identical to an
unclipped run.

Traces cache pre-activations, gate values, cell states, and rescale
factors, so gradients are computed from stored quantities instead of being
re-derived. Hidden and cell states start at zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tasks

__all__ = [
    "LtRnnParams",
    "SRnnParams",
    "LstmParams",
    "PooledLtRnnParams",
    "ForwardTrace",
    "ltrnn_forward",
    "srnn_forward",
    "lstm_forward",
    "pooled_forward",
    "forward",
    "l2_pool",
    "sequence_loss",
    "softmax_cross_entropy",
    "save_params",
    "load_params",
    "CHECKPOINT_MAGIC",
]

NONLINEARITIES = ("identity", "relu", "tanh")


def apply_nonlinearity(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown nonlinearity {name!r}")


def nonlinearity_deriv(name: str, pre: np.ndarray) -> np.ndarray:
    """Derivative evaluated at the pre-activation; relu'(0) is taken as 0."""
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    raise ValueError(f"unknown nonlinearity {name!r}")


def chain_through_nonlinearity(name: str, pre: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """delta * deriv(pre) without materializing the derivative separately."""
    if name == "identity":
        return delta
    if name == "relu":
        return np.where(pre > 0.0, delta, 0.0)
    if name == "tanh":
        t = np.tanh(pre)
        t *= t
        np.subtract(1.0, t, out=t)
        t *= delta
        return t
    raise ValueError(f"unknown nonlinearity {name!r}")


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


@dataclass
class LtRnnParams:
    """Encoder U (d, N), transition V (d, d), bias b (d,), decoder W (M, d)."""

    U: np.ndarray
    V: np.ndarray
    b: np.ndarray
    W: np.ndarray
    nonlinearity: str = "identity"

    def __post_init__(self):
        self.U, self.V, self.b, self.W = map(_f64, (self.U, self.V, self.b, self.W))
        d = self.U.shape[0]
        if self.V.shape != (d, d) or self.b.shape != (d,) or self.W.shape[1] != d:
            raise ValueError("ltrnn params: inconsistent shapes")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    kind = "ltrnn"

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def n_in(self) -> int:
        return self.U.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V, "b": self.b, "W": self.W}

    def copy(self):
        return LtRnnParams(self.U.copy(), self.V.copy(), self.b.copy(),
                           self.W.copy(), self.nonlinearity)


@dataclass
class SRnnParams(LtRnnParams):
    """Same shapes as LtRnnParams; the nonlinearity wraps the whole update."""

    nonlinearity: str = "tanh"
    kind = "srnn"

    def copy(self):
        return SRnnParams(self.U.copy(), self.V.copy(), self.b.copy(),
                          self.W.copy(), self.nonlinearity)


_GATES = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    """Gate weights U_*/V_*/b_* plus decoder W; optional peephole links P_*.

    Peephole matrices are full d x d (not the diagonal restriction some
    implementations use) and feed c_{t-1} into all four pre-activations.
    Either all four are present or none.
    """

    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_g: np.ndarray
    V_i: np.ndarray
    V_f: np.ndarray
    V_o: np.ndarray
    V_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray
    W: np.ndarray
    P_i: np.ndarray | None = None
    P_f: np.ndarray | None = None
    P_o: np.ndarray | None = None
    P_g: np.ndarray | None = None

    kind = "lstm"

    def __post_init__(self):
        for name in ("U_i", "U_f", "U_o", "U_g", "V_i", "V_f", "V_o", "V_g",
                     "b_i", "b_f", "b_o", "b_g", "W"):
            setattr(self, name, _f64(getattr(self, name)))
        peep = [getattr(self, f"P_{g}") for g in _GATES]
        present = [p is not None for p in peep]
        if any(present) and not all(present):
            raise ValueError("lstm params: peephole matrices must all be present or all absent")
        if all(present):
            for g in _GATES:
                setattr(self, f"P_{g}", _f64(getattr(self, f"P_{g}")))
        d = self.U_i.shape[0]
        for g in _GATES:
            if getattr(self, f"U_{g}").shape != self.U_i.shape:
                raise ValueError("lstm params: encoder shapes differ across gates")
            if getattr(self, f"V_{g}").shape != (d, d):
                raise ValueError("lstm params: recurrent shapes inconsistent")
            if getattr(self, f"b_{g}").shape != (d,):
                raise ValueError("lstm params: bias shapes inconsistent")
            if self.peephole and getattr(self, f"P_{g}").shape != (d, d):
                raise ValueError("lstm params: peephole shapes inconsistent")
        if self.W.shape[1] != d:
            raise ValueError("lstm params: decoder width mismatch")

    @property
    def peephole(self) -> bool:
        return self.P_i is not None

    @property
    def hidden(self) -> int:
        return self.U_i.shape[0]

    @property
    def n_in(self) -> int:
        return self.U_i.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for g in _GATES:
            out[f"U_{g}"] = getattr(self, f"U_{g}")
        for g in _GATES:
            out[f"V_{g}"] = getattr(self, f"V_{g}")
        for g in _GATES:
            out[f"b_{g}"] = getattr(self, f"b_{g}")
        out["W"] = self.W
        if self.peephole:
            for g in _GATES:
                out[f"P_{g}"] = getattr(self, f"P_{g}")
        return out

    def copy(self):
        kw = {name: arr.copy() for name, arr in self.arrays().items()}
        return LstmParams(**kw)


@dataclass
class PooledLtRnnParams:
    """Linear-transition recurrence with an l2-pooled decode path.

    The hidden state has k*d coordinates pooled in non-overlapping groups
    of k; W_I decodes the raw state, W_P the pooled radii.
    """

    U: np.ndarray
    V: np.ndarray
    b: np.ndarray
    W_I: np.ndarray
    W_P: np.ndarray
    pool: int = 2
    nonlinearity: str = "identity"

    kind = "pooled"

    def __post_init__(self):
        self.U, self.V, self.b = map(_f64, (self.U, self.V, self.b))
        self.W_I, self.W_P = map(_f64, (self.W_I, self.W_P))
        d = self.U.shape[0]
        if self.pool < 1 or d % self.pool:
            raise ValueError(f"pooled params: hidden dim {d} not divisible by pool {self.pool}")
        if self.V.shape != (d, d) or self.b.shape != (d,):
            raise ValueError("pooled params: inconsistent recurrent shapes")
        if self.W_I.shape[1] != d or self.W_P.shape[1] != d // self.pool:
            raise ValueError("pooled params: decoder widths inconsistent")
        if self.W_I.shape[0] != self.W_P.shape[0]:
            raise ValueError("pooled params: decoder output dims differ")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def n_in(self) -> int:
        return self.U.shape[1]

    @property
    def n_out(self) -> int:
        return self.W_I.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V, "b": self.b, "W_I": self.W_I, "W_P": self.W_P}

    def copy(self):
        return PooledLtRnnParams(self.U.copy(), self.V.copy(), self.b.copy(),
                                 self.W_I.copy(), self.W_P.copy(),
                                 self.pool, self.nonlinearity)


AnyParams = LtRnnParams | SRnnParams | LstmParams | PooledLtRnnParams


@dataclass
class ForwardTrace:
    """Everything the reverse pass needs, stored per step.

    ``h`` and (for the LSTM) ``c`` carry T+1 rows including the zero
    initial state, so ``h[t+1]`` is the state after input step t. All
    arrays keep the batch axis even for single samples.
    """

    kind: str
    inputs: np.ndarray                     # (T, B, N)
    h: np.ndarray                          # (T+1, B, d)
    y: np.ndarray                          # (T, B, M)
    pre: np.ndarray | None = None          # (T, B, d) pre-activations
    clip_scale: np.ndarray | None = None   # (T, B) rescale factors
    c: np.ndarray | None = None            # (T+1, B, d) cell states
    gates: dict[str, np.ndarray] | None = None
    pooled: np.ndarray | None = None       # (T, B, d/k)

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch(self) -> int:
        return self.inputs.shape[1]


def _as_batched(inputs) -> np.ndarray:
    x = _f64(inputs)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        raise ValueError(f"inputs must be (T, N) or (T, B, N), got shape {x.shape}")
    return x


def _check_input_width(params, x):
    if x.shape[2] != params.n_in:
        raise ValueError(f"input dim {x.shape[2]} does not match encoder width {params.n_in}")


def _clip_state(ht, clip_l, t, scale_out):
    norms = np.sqrt(np.einsum("bd,bd->b", ht, ht))
    if not np.any(norms > clip_l):
        return ht  # scale row stays at 1; state untouched bit for bit
    s = np.where(norms > clip_l, clip_l / np.maximum(norms, 1e-300), 1.0)
    scale_out[t] = s
    return ht * s[:, None]


def _check_finite(ht, t):
    if not np.isfinite(ht).all():
        raise FloatingPointError(f"non-finite hidden state at step {t}")


def _linear_transition_states(params, x, clip_l):
    """Shared recurrence for the plain and pooled linear-transition models."""
    T, B, _ = x.shape
    d = params.hidden
    pre = (x.reshape(T * B, -1) @ params.U.T).reshape(T, B, d) + params.b
    a = apply_nonlinearity(params.nonlinearity, pre)
    h = np.zeros((T + 1, B, d))
    scale = np.ones((T, B)) if clip_l is not None else None
    vt = params.V.T
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            np.matmul(h[t], vt, out=h[t + 1])
            h[t + 1] += a[t]
            if clip_l is not None:
                h[t + 1] = _clip_state(h[t + 1], clip_l, t, scale)
            _check_finite(h[t + 1], t)
    return h, pre, scale


def ltrnn_forward(params: LtRnnParams, inputs, clip_l: float | None = None) -> ForwardTrace:
    """h_t = act(U x_t + b) + V h_{t-1}; y_t = W h_t; h_0 = 0."""
    x = _as_batched(inputs)
    _check_input_width(params, x)
    h, pre, scale = _linear_transition_states(params, x, clip_l)
    T, B, d = pre.shape
    y = (h[1:].reshape(T * B, d) @ params.W.T).reshape(T, B, -1)
    return ForwardTrace(kind="ltrnn", inputs=x, h=h, y=y, pre=pre, clip_scale=scale)


def srnn_forward(params: SRnnParams, inputs, clip_l: float | None = None) -> ForwardTrace:
    """h_t = act(U x_t + V h_{t-1} + b); y_t = W h_t; h_0 = 0."""
    x = _as_batched(inputs)
    _check_input_width(params, x)
    T, B, _ = x.shape
    d = params.hidden
    drive = (x.reshape(T * B, -1) @ params.U.T).reshape(T, B, d) + params.b
    h = np.zeros((T + 1, B, d))
    pre = np.empty((T, B, d))
    scale = np.ones((T, B)) if clip_l is not None else None
    vt = params.V.T
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            z = drive[t] + h[t] @ vt
            pre[t] = z
            ht = apply_nonlinearity(params.nonlinearity, z)
            if clip_l is not None:
                ht = _clip_state(ht, clip_l, t, scale)
            _check_finite(ht, t)
            h[t + 1] = ht
    y = (h[1:].reshape(T * B, d) @ params.W.T).reshape(T, B, -1)
    return ForwardTrace(kind="srnn", inputs=x, h=h, y=y, pre=pre, clip_scale=scale)


def lstm_forward(params: LstmParams, inputs) -> ForwardTrace:
    """Gated update: c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t), y_t = W h_t."""
    x = _as_batched(inputs)
    _check_input_width(params, x)
    T, B, _ = x.shape
    d = params.hidden
    u4 = np.concatenate([params.U_i, params.U_f, params.U_o, params.U_g], axis=0)
    v4 = np.concatenate([params.V_i, params.V_f, params.V_o, params.V_g], axis=0)
    b4 = np.concatenate([params.b_i, params.b_f, params.b_o, params.b_g])
    p4 = None
    if params.peephole:
        p4 = np.concatenate([params.P_i, params.P_f, params.P_o, params.P_g], axis=0)
    drive = (x.reshape(T * B, -1) @ u4.T).reshape(T, B, 4 * d) + b4
    h = np.zeros((T + 1, B, d))
    c = np.zeros((T + 1, B, d))
    gates = {g: np.empty((T, B, d)) for g in _GATES}
    v4t, p4t = v4.T, (p4.T if p4 is not None else None)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            z = drive[t] + h[t] @ v4t
            if p4t is not None:
                z = z + c[t] @ p4t
            i = expit(z[:, 0 * d : 1 * d])
            f = expit(z[:, 1 * d : 2 * d])
            o = expit(z[:, 2 * d : 3 * d])
            g = np.tanh(z[:, 3 * d : 4 * d])
            ct = f * c[t] + i * g
            ht = o * np.tanh(ct)
            _check_finite(ct, t)
            gates["i"][t], gates["f"][t], gates["o"][t], gates["g"][t] = i, f, o, g
            c[t + 1] = ct
            h[t + 1] = ht
    y = (h[1:].reshape(T * B, d) @ params.W.T).reshape(T, B, -1)
    return ForwardTrace(kind="lstm", inputs=x, h=h, y=y, c=c, gates=gates)


def l2_pool(h: np.ndarray, k: int) -> np.ndarray:
    """Euclidean norm over consecutive groups of k coordinates (stride k).

    Applies to the last axis, so it works on single vectors and on whole
    trace arrays alike. For k = 2 the output is invariant to any rotation
    within a pool: the phase is discarded, the radius kept.
    """
    h = _f64(h)
    if k < 1 or h.shape[-1] % k:
        raise ValueError(f"l2_pool: last axis {h.shape[-1]} not divisible by k={k}")
    shaped = h.reshape(h.shape[:-1] + (h.shape[-1] // k, k))
    return np.sqrt((shaped * shaped).sum(axis=-1))


def pooled_forward(params: PooledLtRnnParams, inputs, clip_l: float | None = None) -> ForwardTrace:
    """Linear-transition recurrence decoded as y_t = W_I h_t + W_P pool(h_t)."""
    x = _as_batched(inputs)
    _check_input_width(params, x)
    h, pre, scale = _linear_transition_states(params, x, clip_l)
    T, B, d = pre.shape
    pooled = l2_pool(h[1:], params.pool)
    y = (h[1:].reshape(T * B, d) @ params.W_I.T
         + pooled.reshape(T * B, -1) @ params.W_P.T).reshape(T, B, -1)
    return ForwardTrace(kind="pooled", inputs=x, h=h, y=y, pre=pre,
                        clip_scale=scale, pooled=pooled)


def forward(params: AnyParams, inputs, clip_l: float | None = None) -> ForwardTrace:
    """Dispatch to the forward pass matching the parameter bundle."""
    if isinstance(params, PooledLtRnnParams):
        return pooled_forward(params, inputs, clip_l)
    if isinstance(params, LstmParams):
        return lstm_forward(params, inputs)
    if isinstance(params, SRnnParams):
        return srnn_forward(params, inputs, clip_l)
    if isinstance(params, LtRnnParams):
        return ltrnn_forward(params, inputs, clip_l)
    raise TypeError(f"unknown parameter bundle {type(params).__name__}")


def softmax_cross_entropy(logits: np.ndarray, target_ids: np.ndarray) -> float:
    """Mean -log softmax(logits)[target] over all leading axes; ids are 1-based."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    idx = np.asarray(target_ids, dtype=np.int64) - 1
    picked = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0]
    return float((lse - picked).mean())


def sequence_loss(trace: ForwardTrace, sample) -> float:
    """Task loss for a single-sample trace.

    Copy: softmax cross-entropy against the target id, averaged over every
    step of the sequence. Adding: squared error of the final-step output
    against the target, nothing else.
    """
    if trace.batch != 1:
        raise ValueError(f"sequence_loss expects a single-sample trace, batch={trace.batch}")
    if isinstance(sample, tasks.AddingSample):
        if trace.y.shape[2] != 1:
            raise ValueError(f"adding task needs output dim 1, got {trace.y.shape[2]}")
        if trace.steps != sample.values.size:
            raise ValueError("trace length does not match sample length")
        diff = float(trace.y[-1, 0, 0]) - sample.target
        return diff * diff
    if isinstance(sample, tasks.CopySample):
        num_classes = int(np.max(sample.inputs))
        if trace.y.shape[2] != num_classes:
            raise ValueError(
                f"copy task needs output dim {num_classes}, got {trace.y.shape[2]}")
        if trace.steps != sample.inputs.size:
            raise ValueError("trace length does not match sample length")
        return softmax_cross_entropy(trace.y[:, 0, :], sample.targets)
    raise TypeError(f"unknown sample type {type(sample).__name__}")


# --- checkpoint container -------------------------------------------------
#
# Flat little-endian layout (see README for the byte-exact description):
#   magic "ORNNCKP1" | u16 kind len + kind | u16 nonlinearity len + value |
#   u32 pool size (0 if unused) | u8 peephole flag | u32 array count |
#   per array: u16 name len + name, u8 ndim, ndim * u64 dims, float64 data.

CHECKPOINT_MAGIC = b"ORNNCKP1"


def save_params(path, params: AnyParams) -> None:
    nonlin = getattr(params, "nonlinearity", "")
    pool = getattr(params, "pool", 0)
    peephole = isinstance(params, LstmParams) and params.peephole
    blob = [CHECKPOINT_MAGIC]
    for text in (params.kind, nonlin):
        raw = text.encode("ascii")
        blob.append(struct.pack("<H", len(raw)) + raw)
    blob.append(struct.pack("<I", pool))
    blob.append(struct.pack("<B", int(peephole)))
    arrays = params.arrays()
    blob.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("ascii")
        blob.append(struct.pack("<H", len(raw)) + raw)
        blob.append(struct.pack("<B", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blob.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(blob))


def load_params(path) -> AnyParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = 8

    def take(n):
        nonlocal off
        chunk = data[off : off + n]
        off += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<H", take(2))
        return take(n).decode("ascii")

    kind = take_str()
    nonlin = take_str()
    (pool,) = struct.unpack("<I", take(4))
    (peephole,) = struct.unpack("<B", take(1))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        name = take_str()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
    if kind == "ltrnn":
        return LtRnnParams(**arrays, nonlinearity=nonlin)
    if kind == "srnn":
        return SRnnParams(**arrays, nonlinearity=nonlin)
    if kind == "lstm":
        if peephole != (1 if any(k.startswith("P_") for k in arrays) else 0):
            raise ValueError("checkpoint peephole flag disagrees with stored arrays")
        return LstmParams(**arrays)
    if kind == "pooled":
        return PooledLtRnnParams(**arrays, pool=pool, nonlinearity=nonlin)
    raise ValueError(f"unknown model kind {kind!r} in checkpoint")
