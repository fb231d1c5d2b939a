"""Seeded, resumable-free training experiments with CSV metrics.

Training is online: every update draws a fresh minibatch, gradients are
averaged over it, and RMSProp applies the update; evaluation runs on a
held-out set that is fixed (seeded) per run so curves are comparable.
Each run is a pure function of its resolved config - the generator streams
for parameters, batches, the eval set, and the penalty points are derived
from the run seed - so a repeated run writes byte-identical rows (disable
timing to make the wall-clock column deterministic too).

Metrics go to one CSV per run: comment lines echo the resolved config,
then one row per evaluation with columns
``update,train_loss,eval_loss,baseline,spectral_norm_V,wall_seconds,seed,flag``.
``train_loss`` is the mean minibatch loss since the previous row. The flag
column is empty except on the final row of a diverged run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tasks
from .linalg import make_rng, spectral_norm
from .mechanisms import success_sweep, sweep_rows_to_csv
from .models import (
    LstmParams,
    LtRnnParams,
    PooledLtRnnParams,
    forward,
    l2_pool,
    load_params,
    softmax_cross_entropy,
)
from .training import backward_batch, ortho_penalty_step, init_transition, rmsprop_init, rmsprop_step

__all__ = [
    "ExperimentConfig",
    "MetricsRecord",
    "ConfigError",
    "build_model",
    "run_training",
    "run_figure1",
    "run_activation_probe",
    "write_probe_csv",
]

TASKS = ("copy", "varcopy", "adding")
MODELS = ("lt-ornn", "lt-irnn", "lstm", "lstm-peephole", "pooled-ornn")

# generator streams hanging off the run seed
STREAM_PARAMS = 1
STREAM_BATCH = 2
STREAM_EVAL = 3
STREAM_PENALTY = 4
STREAM_PROBE = 5


class ConfigError(ValueError):
    """Invalid or contradictory experiment settings."""


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "copy"
    model: str = "lt-ornn"
    T: int = 100
    S: int = 10
    K: int = 8
    hidden: int | None = None          # default: 80 for copy tasks, 128 for adding
    lr: float | None = None            # default: 1e-4, LSTMs 1e-3
    batch: int = 50
    max_updates: int = 10000
    seed: int = 0
    clip_l: float | None = 1000.0      # linear-transition models only
    normalize_by_T: bool = True
    normalize_variant: str = "hidden-inject"   # or "param-scale"
    ortho_penalty: bool = False
    penalty_m: int = 50
    penalty_step: float = 0.01
    pool: int = 2
    nonlinearity: str | None = None    # default: identity for copy, relu for adding
    marker_scheme: str = "halves"
    eval_every: int = 100
    eval_size: int = 1000
    stop_below_eval: float | None = None

    def resolved(self) -> "ExperimentConfig":
        """Fill task/model-dependent defaults and validate."""
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r} (choose from {TASKS})")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r} (choose from {MODELS})")
        hidden = self.hidden
        if hidden is None:
            hidden = 128 if self.task == "adding" else 80
        lr = self.lr
        if lr is None:
            lr = 1e-3 if self.model.startswith("lstm") else 1e-4
        nonlin = self.nonlinearity
        if nonlin is None:
            nonlin = "relu" if self.task == "adding" else "identity"
        cfg = replace(self, hidden=hidden, lr=lr, nonlinearity=nonlin)
        if cfg.model == "pooled-ornn" and hidden % cfg.pool:
            raise ConfigError(f"hidden={hidden} not divisible by pool={cfg.pool}")
        for name in ("T", "S", "K", "hidden", "batch", "max_updates",
                     "eval_every", "eval_size", "penalty_m", "pool"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if cfg.task != "adding" and cfg.K < 2:
            raise ConfigError("copy tasks need K >= 2")
        if cfg.lr <= 0:
            raise ConfigError("lr must be positive")
        if cfg.normalize_variant not in ("hidden-inject", "param-scale"):
            raise ConfigError(f"unknown normalize variant {cfg.normalize_variant!r}")
        if cfg.marker_scheme not in ("halves", "uniform-pair"):
            raise ConfigError(f"unknown marker scheme {cfg.marker_scheme!r}")
        if cfg.clip_l is not None and cfg.clip_l <= 0:
            raise ConfigError("clip_l must be positive (or omitted)")
        return cfg

    def dims(self) -> tuple[int, int]:
        """(input dim, output dim) for the resolved task."""
        if self.task == "adding":
            return 2, 1
        return self.K + 2, self.K + 2


@dataclass
class MetricsRecord:
    update: int
    train_loss: float
    eval_loss: float
    baseline: float
    spectral_norm_V: float
    wall_seconds: float
    seed: int
    flag: str = ""

    def csv_row(self) -> str:
        return ",".join([
            str(self.update), repr(float(self.train_loss)), repr(float(self.eval_loss)),
            repr(float(self.baseline)), repr(float(self.spectral_norm_V)),
            repr(float(self.wall_seconds)), str(self.seed), self.flag,
        ])


CSV_HEADER = "update,train_loss,eval_loss,baseline,spectral_norm_V,wall_seconds,seed,flag"


def build_model(cfg: ExperimentConfig, rng: np.random.Generator):
    """Parameter bundle for a resolved config; encoder/decoder weights are
    N(0, 1/fan_in), biases zero (LSTM forget bias 1), transition per model."""
    n_in, n_out = cfg.dims()
    d = cfg.hidden

    def w(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    if cfg.model in ("lt-ornn", "lt-irnn"):
        U = w(d, n_in)
        V = init_transition("orthogonal" if cfg.model == "lt-ornn" else "identity", d, rng)
        W = w(n_out, d)
        return LtRnnParams(U=U, V=V, b=np.zeros(d), W=W, nonlinearity=cfg.nonlinearity)
    if cfg.model == "pooled-ornn":
        U = w(d, n_in)
        V = init_transition("orthogonal", d, rng)
        W_I = w(n_out, d)
        W_P = w(n_out, d // cfg.pool)
        return PooledLtRnnParams(U=U, V=V, b=np.zeros(d), W_I=W_I, W_P=W_P,
                                 pool=cfg.pool, nonlinearity=cfg.nonlinearity)
    kw = {}
    for gate in ("i", "f", "o", "g"):
        kw[f"U_{gate}"] = w(d, n_in)
        kw[f"V_{gate}"] = w(d, d)
        kw[f"b_{gate}"] = np.zeros(d)
    kw["b_f"] = np.ones(d)
    kw["W"] = w(n_out, d)
    if cfg.model == "lstm-peephole":
        for gate in ("i", "f", "o", "g"):
            kw[f"P_{gate}"] = w(d, d)
    return LstmParams(**kw)


def _task_config(cfg: ExperimentConfig):
    if cfg.task == "adding":
        return tasks.AddingConfig(T=cfg.T, marker_scheme=cfg.marker_scheme)
    return tasks.CopyConfig(K=cfg.K, S=cfg.S, T=cfg.T,
                            variable_delimiter=(cfg.task == "varcopy"))


def _sample_batch(cfg: ExperimentConfig, task_cfg, rng, n: int):
    """Inputs (T, n, N) and targets ((T, n) ids for copy, (n,) for adding)."""
    if cfg.task == "adding":
        values, markers, targets = tasks.gen_adding_batch(task_cfg, rng, n)
        x = np.stack([values.T, markers.T.astype(np.float64)], axis=2)
        return x, targets
    ids, targets, _ = tasks.gen_copy_batch(task_cfg, rng, n)
    L, M = task_cfg.length, task_cfg.num_classes
    x = np.zeros((L, n, M))
    x[np.arange(L)[:, None], np.arange(n)[None, :], ids.T - 1] = 1.0
    return x, targets.T


def _batch_loss(cfg: ExperimentConfig, trace, targets) -> float:
    if cfg.task == "adding":
        diff = trace.y[-1, :, 0] - targets
        return float((diff * diff).mean())
    return softmax_cross_entropy(trace.y, targets)


def _eval_loss(cfg: ExperimentConfig, params, eval_x, eval_targets, chunk: int = 250) -> float:
    total = 0.0
    n = eval_x.shape[1]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        trace = forward(params, eval_x[:, lo:hi], _clip_for(cfg, params))
        t = eval_targets[lo:hi] if cfg.task == "adding" else eval_targets[:, lo:hi]
        total += _batch_loss(cfg, trace, t) * (hi - lo)
    return total / n


def _clip_for(cfg: ExperimentConfig, params):
    if isinstance(params, LstmParams):
        return None
    return cfg.clip_l


def _transition_norm(params) -> float:
    if isinstance(params, LstmParams):
        return max(spectral_norm(getattr(params, f"V_{g}")) for g in ("i", "f", "o", "g"))
    return spectral_norm(params.V)


def _baseline(cfg: ExperimentConfig, task_cfg) -> float:
    if cfg.task == "adding":
        return tasks.adding_baseline()
    return tasks.copy_baseline(task_cfg)


def _scale_hidden_path_grads(grads, T: int):
    for name, g in grads.items():
        if name not in ("W", "W_I", "W_P"):
            grads[name] = g / T
    return grads


def run_training(config: ExperimentConfig, out_path, timing: bool = True,
                 save_checkpoint=None) -> list[MetricsRecord]:
    """Train one model, streaming metrics rows to ``out_path``.

    Returns the records. On a non-finite loss or activation the run stops
    and the final row carries flag "diverged". ``timing=False`` writes 0.0
    wall seconds, making the CSV bytes reproducible.
    """
    cfg = config.resolved()
    task_cfg = _task_config(cfg)
    params = build_model(cfg, make_rng(cfg.seed, STREAM_PARAMS))
    state = rmsprop_init(params, cfg.lr)
    batch_rng = make_rng(cfg.seed, STREAM_BATCH)
    penalty_rng = make_rng(cfg.seed, STREAM_PENALTY)
    eval_x, eval_targets = _sample_batch(cfg, task_cfg, make_rng(cfg.seed, STREAM_EVAL),
                                         cfg.eval_size)
    baseline = _baseline(cfg, task_cfg)
    clip_l = _clip_for(cfg, params)
    inject = cfg.normalize_by_T and cfg.normalize_variant == "hidden-inject"
    task_kind = "adding" if cfg.task == "adding" else "copy"

    records: list[MetricsRecord] = []
    start = time.perf_counter()
    running, running_n = 0.0, 0
    with open(out_path, "w", newline="\n") as f:
        for name in sorted(fld.name for fld in fields(cfg)):
            f.write(f"# {name}={getattr(cfg, name)}\n")
        f.write(CSV_HEADER + "\n")

        def emit(update, train_loss, eval_loss, flag=""):
            rec = MetricsRecord(
                update=update, train_loss=train_loss, eval_loss=eval_loss,
                baseline=baseline, spectral_norm_V=_transition_norm(params),
                wall_seconds=time.perf_counter() - start if timing else 0.0,
                seed=cfg.seed, flag=flag)
            records.append(rec)
            f.write(rec.csv_row() + "\n")
            f.flush()
            return rec

        for update in range(1, cfg.max_updates + 1):
            x, targets = _sample_batch(cfg, task_cfg, batch_rng, cfg.batch)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    trace = forward(params, x, clip_l)
                    loss = _batch_loss(cfg, trace, targets)
                    if not np.isfinite(loss):
                        raise FloatingPointError("non-finite training loss")
                    grads = backward_batch(params, trace, task_kind, targets,
                                           normalize_by_T=inject)
                    if cfg.normalize_by_T and cfg.normalize_variant == "param-scale":
                        grads = _scale_hidden_path_grads(grads, trace.steps)
                    rmsprop_step(state, params, grads)
                    if cfg.ortho_penalty:
                        params.V = ortho_penalty_step(params.V, cfg.penalty_m,
                                                      cfg.penalty_step, penalty_rng)
            except FloatingPointError:
                emit(update, float("nan"), float("nan"), flag="diverged")
                return records
            running += loss
            running_n += 1
            if update % cfg.eval_every == 0 or update == cfg.max_updates:
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        eval_loss = _eval_loss(cfg, params, eval_x, eval_targets)
                except FloatingPointError:
                    eval_loss = float("nan")
                if not np.isfinite(eval_loss):
                    emit(update, running / running_n, eval_loss, flag="diverged")
                    return records
                emit(update, running / running_n, eval_loss)
                running, running_n = 0.0, 0
                if cfg.stop_below_eval is not None and eval_loss < cfg.stop_below_eval:
                    break
    if save_checkpoint is not None:
        from .models import save_params
        save_params(save_checkpoint, params)
    return records


def run_figure1(out_path, d: int = 128, T: int = 500, trials: int = 500,
                seed: int = 0, K_grid=(2, 4, 8, 16),
                S_grid=(1, 2, 5, 10, 20, 50)) -> list[dict]:
    """Mechanism success-rate sweep over the standard (K, S) grid, to CSV."""
    rows = success_sweep(d, T, K_grid, S_grid, trials, seed)
    sweep_rows_to_csv(rows, out_path)
    return rows


def write_probe_csv(params, inputs, out_path) -> None:
    """Per-step hidden activations (and pooled radii, if any) as CSV."""
    trace = forward(params, inputs)
    h = trace.h[1:, 0, :]
    pooled = None
    if isinstance(params, PooledLtRnnParams):
        pooled = l2_pool(h, params.pool)
    with open(out_path, "w", newline="\n") as f:
        cols = ["step"] + [f"h_{i}" for i in range(h.shape[1])]
        if pooled is not None:
            cols += [f"pool_{i}" for i in range(pooled.shape[1])]
        f.write(",".join(cols) + "\n")
        for t in range(h.shape[0]):
            cells = [str(t)] + [repr(float(v)) for v in h[t]]
            if pooled is not None:
                cells += [repr(float(v)) for v in pooled[t]]
            f.write(",".join(cells) + "\n")


def run_activation_probe(checkpoint_path, task: str, T: int, out_path,
                         S: int = 10, K: int = 8, seed: int = 0,
                         marker_scheme: str = "halves") -> None:
    """Probe a trained checkpoint on one fresh sample of the given task."""
    try:
        params = load_params(checkpoint_path)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}") from e
    rng = make_rng(seed, STREAM_PROBE)
    if task == "adding":
        sample = tasks.gen_adding(tasks.AddingConfig(T=T, marker_scheme=marker_scheme), rng)
        inputs = tasks.encode_adding_inputs(sample)
    elif task in ("copy", "varcopy"):
        sample = tasks.gen_copy(
            tasks.CopyConfig(K=K, S=S, T=T, variable_delimiter=(task == "varcopy")), rng)
        inputs = tasks.encode_copy_inputs(sample, K)
    else:
        raise ConfigError(f"unknown task {task!r}")
    write_probe_csv(params, inputs, out_path)
