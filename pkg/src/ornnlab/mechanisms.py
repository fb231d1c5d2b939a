"""Hand-built exact solutions to the synthetic tasks, plus their
Monte Carlo quality measurements.

The copy solution is a phase-rotation memory. Each of the K symbols is
embedded as a unit row in 2d coordinates; the transition matrix is
block-diagonal with d two-dimensional rotations whose per-step angles are
integer multiples of 2*pi/(T+S), so the whole state spins like a clock
that realigns exactly every T+S steps - precisely when replay begins. One
extra counter coordinate increments on every input (up on symbols and,
strongly, on the trigger; down on blanks) so the decoder can prefer the
blank row while waiting and switch to nearest-symbol matching during
replay. Recall is approximate: the stored rows interfere, and the expected
squared overlap between a row and the rotated sum of the others scales
like (S-1)/d (see :func:`interference_stat`), which is what degrades
success at large S or small d.

The adding solution is a single ReLU unit with an identity transition:
relu(value + marker - 1) is zero off the marked steps (values stay below
one) and exactly the value on them, so the unit accumulates the marked
pair and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import block_rotation, make_rng, sample_unit_sphere
from .models import LtRnnParams, ltrnn_forward
from .tasks import CopyConfig, CopySample, encode_copy_inputs, gen_copy

__all__ = [
    "ClockMechanism",
    "build_copy_mechanism",
    "evaluate_copy_mechanism",
    "success_sweep",
    "sweep_rows_to_csv",
    "interference_stat",
    "build_adding_mechanism",
]


@dataclass
class ClockMechanism:
    """Rotation-memory solution of the copy task.

    ``construct`` is the (K+2, 2d+1) embedding table: symbol rows are unit
    vectors plus the counter increment, the blank row only decrements the
    counter, the trigger row adds T+S+1 to it. The encoder is its
    transpose; the decoder reuses its rows with the blank row rescaled by
    S+1 and the trigger row zeroed.
    """

    d: int
    K: int
    S: int
    T: int
    phases: np.ndarray          # (d,) integers in 1..T+S
    construct: np.ndarray       # (K+2, 2d+1)
    params: LtRnnParams

    @property
    def period(self) -> int:
        return self.T + self.S


def build_copy_mechanism(d: int, K: int, S: int, T: int,
                         rng: np.random.Generator,
                         counter_increment: float | None = None) -> ClockMechanism:
    """Draw phases and symbol rows, assemble the rotation-memory network.

    ``counter_increment`` is the counter-column entry of the symbol rows;
    it defaults to 1/(S+1).
    """
    if d < 1 or K < 1 or S < 1 or T < 2:
        raise ValueError("need d >= 1, K >= 1, S >= 1, T >= 2")
    period = T + S
    phases = rng.integers(1, period + 1, size=d)
    rows = sample_unit_sphere(2 * d, K, rng)
    inc = 1.0 / (S + 1) if counter_increment is None else float(counter_increment)

    construct = np.zeros((K + 2, 2 * d + 1))
    construct[:K, : 2 * d] = rows
    construct[:K, 2 * d] = inc
    construct[K, 2 * d] = -1.0
    construct[K + 1, 2 * d] = period + 1

    V = np.zeros((2 * d + 1, 2 * d + 1))
    V[: 2 * d, : 2 * d] = block_rotation(phases, period)
    V[2 * d, 2 * d] = 1.0

    W = construct.copy()
    W[K] *= S + 1
    W[K + 1] = 0.0

    params = LtRnnParams(U=construct.T.copy(), V=V, b=np.zeros(2 * d + 1),
                         W=W, nonlinearity="identity")
    return ClockMechanism(d=d, K=K, S=S, T=T, phases=phases,
                          construct=construct, params=params)


def _predictions(mech: ClockMechanism, sample: CopySample) -> np.ndarray:
    trace = ltrnn_forward(mech.params, encode_copy_inputs(sample, mech.K))
    return trace.y[:, 0, :].argmax(axis=-1) + 1


def evaluate_copy_mechanism(mech: ClockMechanism, sample: CopySample,
                            include_blanks: bool = False) -> bool:
    """Run the full forward pass and score the sample.

    Success means the argmax prediction matches the target at every one of
    the S replay steps. With ``include_blanks`` the waiting span must be
    blank as well; that span excludes the trigger step itself, where the
    counter jumps positive and the construction intentionally sacrifices
    the blank output, and the first S steps, where it may echo the symbol
    just read.
    """
    L = mech.T + 2 * mech.S
    if sample.inputs.size != L:
        raise ValueError(f"sample length {sample.inputs.size} does not match T+2S={L}")
    if sample.delimiter_pos != mech.S + mech.T - 1:
        raise ValueError("mechanism requires the fixed trigger position S+T")
    pred = _predictions(mech, sample)
    recall = slice(mech.period, L)
    ok = bool(np.array_equal(pred[recall], sample.targets[recall]))
    if ok and include_blanks:
        blanks = slice(mech.S, mech.period - 1)
        ok = bool(np.array_equal(pred[blanks], sample.targets[blanks]))
    return ok


def _counter_track(S: int, T: int, inc: float) -> np.ndarray:
    """Counter coordinate after each step, 0-based step index."""
    track = np.empty(T + 2 * S)
    track[:S] = inc * np.arange(1, S + 1)
    track[S : S + T - 1] = track[S - 1] - np.arange(1, T)
    track[S + T - 1] = track[S + T - 2] + (T + S + 1)
    track[S + T :] = track[S + T - 1] - np.arange(1, S + 1)
    return track


def _fast_trial(d: int, K: int, S: int, T: int, rng: np.random.Generator,
                counter_increment: float | None):
    """One mechanism trial via per-block rotation angles instead of the
    dense forward pass; draw order matches build + gen_copy exactly.

    Returns (recall_ok, strict_ok) where strict additionally requires the
    waiting span (trigger step excluded) to come out blank.
    """
    period = T + S
    phases = rng.integers(1, period + 1, size=d)
    rows = sample_unit_sphere(2 * d, K, rng)
    sample = gen_copy(CopyConfig(K=K, S=S, T=T), rng)
    prefix = sample.inputs[:S] - 1              # 0-based symbol indices
    inc = 1.0 / (S + 1) if counter_increment is None else float(counter_increment)

    theta = 2.0 * np.pi * phases / period
    rx, ry = rows[:, 0::2], rows[:, 1::2]       # (K, d) block coordinates

    # state after the prefix: sum of stored rows spun S-j steps onward
    ang = np.outer(S - np.arange(1, S + 1), theta)        # (S, d)
    c, s = np.cos(ang), np.sin(ang)
    px, py = rx[prefix], ry[prefix]                       # (S, d)
    bx = (c * px + s * py).sum(axis=0)                    # (d,)
    by = (-s * px + c * py).sum(axis=0)

    # spin the stored state to every step we score
    powers = np.concatenate([np.arange(1, T), T + np.arange(1, S + 1)])
    ang = np.outer(powers, theta)                         # (T-1+S, d)
    c, s = np.cos(ang), np.sin(ang)
    hx = c * bx + s * by
    hy = -s * bx + c * by
    scores = hx @ rx.T + hy @ ry.T                        # (steps, K)

    counters = _counter_track(S, T, inc)
    step_idx = np.concatenate([S + np.arange(1, T), period + np.arange(1, S + 1)]) - 1
    track = counters[step_idx]
    full = np.empty((scores.shape[0], K + 2))
    full[:, :K] = scores + inc * track[:, None]
    full[:, K] = -(S + 1) * track
    full[:, K + 1] = 0.0
    pred = full.argmax(axis=1) + 1

    recall_pred = pred[T - 1 :]
    recall_ok = bool(np.array_equal(recall_pred, prefix + 1))
    blanks_ok = bool((pred[: T - 1] == K + 1).all())
    return recall_ok, recall_ok and blanks_ok


def success_sweep(d: int, T: int, K_grid, S_grid, trials: int, seed: int,
                  counter_increment: float | None = None) -> list[dict]:
    """Mechanism success rates over a (K, S) grid, fresh build per trial.

    Each grid point gets its own generator stream so the reduction order
    is deterministic in (K, S, trial). Rows carry both the replay-only
    success rate and the stricter replay-plus-waiting-span rate.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows = []
    for gi, (K, S) in enumerate((K, S) for K in K_grid for S in S_grid):
        rng = make_rng(seed, 1000 + gi)
        wins = strict_wins = 0
        for _ in range(trials):
            ok, strict = _fast_trial(d, K, S, T, rng, counter_increment)
            wins += ok
            strict_wins += strict
        rows.append({
            "K": K, "S": S, "trials": trials,
            "successes": wins, "rate": wins / trials, "seed": seed,
            "successes_strict": strict_wins, "rate_strict": strict_wins / trials,
        })
    return rows


SWEEP_COLUMNS = ("K", "S", "trials", "successes", "rate", "seed",
                 "successes_strict", "rate_strict")


def sweep_rows_to_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(row[c]) for c in SWEEP_COLUMNS) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def interference_stat(d: int, S: int, trials: int, rng: np.random.Generator,
                      period: int = 512) -> float:
    """Monte Carlo mean of the squared recall interference.

    The scored quantity is the overlap between a stored unit row and the
    rotated sum of S-1 re-encodings of it, |u^T sum_{j=2..S} Q^{1-j} u|^2,
    with fresh phases and a fresh row per trial. For a 2x2 rotation block
    the quadratic form collapses to r * cos(p*theta) with r the block's
    squared radius, so the statistic is computed in closed form per block;
    its mean matches (S-1)/d for large d.
    """
    if S < 2:
        raise ValueError("interference needs S >= 2")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    q_powers = np.arange(1, S)
    total = 0.0
    done = 0
    while done < trials:
        chunk = min(2000, trials - done)
        l = rng.integers(1, period + 1, size=(chunk, d))
        theta = 2.0 * np.pi * l / period
        u = sample_unit_sphere(2 * d, chunk, rng)
        r = u[:, 0::2] ** 2 + u[:, 1::2] ** 2                 # (chunk, d)
        csum = np.cos(theta[:, :, None] * q_powers).sum(axis=2)
        x = (r * csum).sum(axis=1)
        total += float((x * x).sum())
        done += chunk
    return total / trials


def build_adding_mechanism() -> LtRnnParams:
    """Exact one-unit solution of the adding task (ReLU, identity transition)."""
    return LtRnnParams(U=[[1.0, 1.0]], V=[[1.0]], b=[-1.0], W=[[1.0]],
                       nonlinearity="relu")
