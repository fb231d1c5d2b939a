"""Generators, chance baselines, and encodings for the synthetic tasks.

Three tasks exercise long-range memory:

* copy: memorize a categorical prefix of length S, idle through T blank
  steps, replay the prefix after a one-step trigger symbol;
* variable copy: same, but the trigger is placed uniformly at random
  inside the delay span;
* adding: read a length-T sequence of (value, marker) pairs and output the
  sum of the two marked values at the final step.

Symbol ids are 1-based: 1..K are the alphabet, K+1 is the blank, K+2 the
replay trigger. Sequence positions in the sample objects are 0-based array
indices. Generators are pure functions of (config, rng) and are
deterministic under a fixed generator key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CopyConfig",
    "CopySample",
    "AddingConfig",
    "AddingSample",
    "gen_copy",
    "gen_copy_batch",
    "gen_adding",
    "gen_adding_batch",
    "encode_one_hot",
    "encode_copy_inputs",
    "encode_adding_inputs",
    "copy_baseline",
    "adding_baseline",
    "copy_sample_to_line",
    "copy_sample_from_line",
    "adding_sample_to_line",
    "adding_sample_from_line",
]


@dataclass(frozen=True)
class CopyConfig:
    """Sizes for the copy task: alphabet K, prefix length S, delay T.

    Total sequence length is T + 2S. K = 1 is permitted only as the
    degenerate case used by the chance baseline; meaningful tasks have
    K >= 2.
    """

    K: int
    S: int
    T: int
    variable_delimiter: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"copy: K must be >= 1, got {self.K}")
        if self.S < 1:
            raise ValueError(f"copy: S must be >= 1, got {self.S}")
        if self.T < 2:
            raise ValueError(f"copy: T must be >= 2, got {self.T}")

    @property
    def length(self) -> int:
        return self.T + 2 * self.S

    @property
    def blank(self) -> int:
        return self.K + 1

    @property
    def delimiter(self) -> int:
        return self.K + 2

    @property
    def num_classes(self) -> int:
        return self.K + 2


@dataclass
class CopySample:
    inputs: np.ndarray      # (T+2S,) ids in 1..K+2
    targets: np.ndarray     # (T+2S,) ids; blank except the replay window
    delimiter_pos: int      # 0-based index of the trigger symbol


@dataclass(frozen=True)
class AddingConfig:
    """Length T plus the marker placement convention.

    ``marker_scheme`` is "halves" (first marker uniform in the first half,
    second in the second half) or "uniform-pair" (an unordered uniform pair
    of distinct positions).
    """

    T: int
    marker_scheme: str = "halves"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"adding: T must be >= 2, got {self.T}")
        if self.marker_scheme not in ("halves", "uniform-pair"):
            raise ValueError(f"adding: unknown marker scheme {self.marker_scheme!r}")


@dataclass
class AddingSample:
    values: np.ndarray      # (T,) uniform on [0, 1)
    markers: np.ndarray     # (T,) ints, exactly two entries equal 1
    target: float           # sum of the two marked values


def gen_copy(config: CopyConfig, rng: np.random.Generator) -> CopySample:
    """One copy sample; the trigger sits at index S+T-1 unless variable."""
    prefix = rng.integers(1, config.K + 1, size=config.S)
    if config.variable_delimiter:
        pos = int(rng.integers(config.S, config.S + config.T))
    else:
        pos = config.S + config.T - 1
    inputs = np.full(config.length, config.blank, dtype=np.int64)
    inputs[: config.S] = prefix
    inputs[pos] = config.delimiter
    targets = np.full(config.length, config.blank, dtype=np.int64)
    targets[pos + 1 : pos + 1 + config.S] = prefix
    return CopySample(inputs=inputs, targets=targets, delimiter_pos=pos)


def gen_copy_batch(config: CopyConfig, rng: np.random.Generator, n: int):
    """Vectorized batch of copy samples.

    Returns (inputs, targets, delimiter_pos) with shapes (n, T+2S),
    (n, T+2S) and (n,). Row i satisfies the same invariants as
    ``gen_copy`` output, but the draw order differs from n sequential
    single-sample calls.
    """
    prefix = rng.integers(1, config.K + 1, size=(n, config.S))
    if config.variable_delimiter:
        pos = rng.integers(config.S, config.S + config.T, size=n)
    else:
        pos = np.full(n, config.S + config.T - 1, dtype=np.int64)
    inputs = np.full((n, config.length), config.blank, dtype=np.int64)
    inputs[:, : config.S] = prefix
    rows = np.arange(n)
    inputs[rows, pos] = config.delimiter
    targets = np.full((n, config.length), config.blank, dtype=np.int64)
    offsets = pos[:, None] + 1 + np.arange(config.S)[None, :]
    targets[rows[:, None], offsets] = prefix
    return inputs, targets, pos


def gen_adding(config: AddingConfig, rng: np.random.Generator) -> AddingSample:
    values = rng.random(config.T)
    j1, j2 = _marker_pair(config, rng)
    markers = np.zeros(config.T, dtype=np.int64)
    markers[j1] = 1
    markers[j2] = 1
    return AddingSample(values=values, markers=markers, target=float(values[j1] + values[j2]))


def _marker_pair(config: AddingConfig, rng: np.random.Generator):
    if config.marker_scheme == "halves":
        j1 = int(rng.integers(0, config.T // 2))
        j2 = int(rng.integers(config.T // 2, config.T))
    else:
        j1, j2 = sorted(int(v) for v in rng.choice(config.T, size=2, replace=False))
    return j1, j2


def gen_adding_batch(config: AddingConfig, rng: np.random.Generator, n: int):
    """Vectorized batch: (values, markers, targets) with shapes (n, T), (n, T), (n,)."""
    values = rng.random((n, config.T))
    if config.marker_scheme == "halves":
        j1 = rng.integers(0, config.T // 2, size=n)
        j2 = rng.integers(config.T // 2, config.T, size=n)
    else:
        j1 = np.empty(n, dtype=np.int64)
        j2 = np.empty(n, dtype=np.int64)
        for i in range(n):
            j1[i], j2[i] = _marker_pair(config, rng)
    markers = np.zeros((n, config.T), dtype=np.int64)
    rows = np.arange(n)
    markers[rows, j1] = 1
    markers[rows, j2] = 1
    targets = values[rows, j1] + values[rows, j2]
    return values, markers, targets


def encode_one_hot(category: int, num_classes: int) -> np.ndarray:
    """Unit basis vector for a 1-based category id."""
    if not 1 <= category <= num_classes:
        raise ValueError(f"one-hot: id {category} outside 1..{num_classes}")
    v = np.zeros(num_classes)
    v[category - 1] = 1.0
    return v


def encode_copy_inputs(sample: CopySample, K: int) -> np.ndarray:
    """(T+2S, K+2) one-hot input matrix for a copy sample."""
    ids = np.asarray(sample.inputs)
    out = np.zeros((ids.size, K + 2))
    out[np.arange(ids.size), ids - 1] = 1.0
    return out


def encode_adding_inputs(sample: AddingSample) -> np.ndarray:
    """(T, 2) input matrix: column 0 the values, column 1 the markers."""
    return np.column_stack([sample.values, sample.markers.astype(np.float64)])


def copy_baseline(config: CopyConfig) -> float:
    """Mean per-step cross-entropy of the best memoryless strategy.

    That strategy outputs the blank with certainty outside the replay
    window and a uniform distribution over the K symbols inside it, for a
    mean loss of S*ln(K) / (T+2S).
    """
    return config.S * math.log(config.K) / config.length


def adding_baseline() -> float:
    """Squared-error of always predicting the target mean 1.0: Var(U+U') = 1/6."""
    return 1.0 / 6.0


# --- line-oriented serialization, one sample per line (golden-file tests) ---

def copy_sample_to_line(config: CopyConfig, sample: CopySample) -> str:
    fields = ["copy", str(config.K), str(config.S), str(config.T),
              str(int(config.variable_delimiter)), str(sample.delimiter_pos)]
    fields += [str(int(v)) for v in sample.inputs]
    fields += [str(int(v)) for v in sample.targets]
    return " ".join(fields)


def copy_sample_from_line(line: str):
    parts = line.split()
    if not parts or parts[0] != "copy":
        raise ValueError("copy line must start with 'copy'")
    K, S, T, var, pos = (int(p) for p in parts[1:6])
    config = CopyConfig(K=K, S=S, T=T, variable_delimiter=bool(var))
    body = parts[6:]
    if len(body) != 2 * config.length:
        raise ValueError("copy line has wrong number of ids")
    ids = np.array([int(p) for p in body], dtype=np.int64)
    return config, CopySample(inputs=ids[: config.length],
                              targets=ids[config.length :],
                              delimiter_pos=pos)


def adding_sample_to_line(config: AddingConfig, sample: AddingSample) -> str:
    fields = ["adding", str(config.T), repr(float(sample.target))]
    fields += [repr(float(v)) for v in sample.values]
    fields += [str(int(m)) for m in sample.markers]
    return " ".join(fields)


def adding_sample_from_line(line: str):
    parts = line.split()
    if not parts or parts[0] != "adding":
        raise ValueError("adding line must start with 'adding'")
    T = int(parts[1])
    target = float(parts[2])
    body = parts[3:]
    if len(body) != 2 * T:
        raise ValueError("adding line has wrong number of fields")
    values = np.array([float(p) for p in body[:T]])
    markers = np.array([int(p) for p in body[T:]], dtype=np.int64)
    config = AddingConfig(T=T)
    return config, AddingSample(values=values, markers=markers, target=target)
