"""Hard concrete gates over parameter groups.

A gate is a stretched-and-clipped binary concrete variable: sample
s = sigmoid((log u - log(1-u) + log_alpha) / beta) from logistic noise,
stretch to (gamma, zeta) with gamma < 0 < 1 < zeta, and clip to [0, 1].
The clipping puts positive probability mass on exactly 0 and exactly 1,
and P(gate > 0) has the closed form

    psi = sigmoid(log_alpha - beta * log(-gamma / zeta))

which doubles as the parameter of the equivalent Bernoulli distribution
used when the downstream quantity only cares about the gate's support.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

DEFAULT_BETA = 2.0 / 3.0
DEFAULT_GAMMA = -0.1
DEFAULT_ZETA = 1.1

# uniform noise is clamped away from {0, 1} before the logit
NOISE_EPS = 1e-7


class Granularity(enum.Enum):
    PER_OUTPUT_FILTER = "per_output_filter"
    PER_INPUT_NEURON = "per_input_neuron"


class SampleKind(enum.Enum):
    HARD_CONCRETE = "hard_concrete"
    BERNOULLI = "bernoulli"
    DETERMINISTIC = "deterministic"


@dataclass
class GateGroup:
    """Variational gate parameters for one layer's groups.

    log_alpha is trained; beta (temperature), gamma and zeta (stretch
    interval) are fixed hyperparameters.
    """

    log_alpha: np.ndarray
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    zeta: float = DEFAULT_ZETA
    granularity: Granularity = Granularity.PER_OUTPUT_FILTER

    def __post_init__(self):
        self.log_alpha = np.asarray(self.log_alpha)
        if self.log_alpha.ndim != 1:
            raise ValueError(f"log_alpha must be a vector, got shape {self.log_alpha.shape}")
        if not np.all(np.isfinite(self.log_alpha)):
            raise ValueError("log_alpha entries must be finite")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not (self.gamma < 0 < 1 < self.zeta):
            raise ValueError(
                f"stretch interval must satisfy gamma < 0 < 1 < zeta, got ({self.gamma}, {self.zeta})"
            )

    def __len__(self):
        return self.log_alpha.shape[0]


@dataclass
class GateSample:
    values: np.ndarray
    kind: SampleKind = SampleKind.HARD_CONCRETE


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _hard_concrete(log_alpha, u, beta, gamma, zeta):
    """Returns (gate, sigmoid_arg_value) for clamped noise u."""
    u = np.clip(u, NOISE_EPS, 1.0 - NOISE_EPS)
    s = _sigmoid((np.log(u) - np.log1p(-u) + log_alpha) / beta)
    stretched = s * (zeta - gamma) + gamma
    return np.clip(stretched, 0.0, 1.0), s


def sample_hard_concrete(group: GateGroup, u: np.ndarray) -> GateSample:
    """One hard concrete draw per group from uniform noise u in (0, 1)."""
    u = np.asarray(u)
    if u.shape != group.log_alpha.shape:
        raise ValueError(f"noise shape {u.shape} does not match gates {group.log_alpha.shape}")
    z, _ = _hard_concrete(group.log_alpha, u, group.beta, group.gamma, group.zeta)
    return GateSample(values=z, kind=SampleKind.HARD_CONCRETE)


def sample_on_tape(log_alpha: Tensor, u: np.ndarray, tape, beta=DEFAULT_BETA,
                   gamma=DEFAULT_GAMMA, zeta=DEFAULT_ZETA) -> Tensor:
    """Hard concrete draw recorded on the tape, differentiable w.r.t.
    log_alpha wherever the stretched sample is not clipped."""
    u = np.clip(np.asarray(u, dtype=log_alpha.dtype), NOISE_EPS, 1.0 - NOISE_EPS)
    z, s = _hard_concrete(log_alpha.data, u, beta, gamma, zeta)
    out = Tensor(z, requires_grad=log_alpha.requires_grad)
    if tape is not None and out.requires_grad:
        stretched = s * (zeta - gamma) + gamma
        unclipped = (stretched > 0.0) & (stretched < 1.0)
        local = np.where(unclipped, (zeta - gamma) * s * (1.0 - s) / beta, 0.0).astype(z.dtype)

        def backward(g):
            return [g * local]

        tape.record(out, [(log_alpha.id, True)], backward)
    return out


def gate_active_prob(group: GateGroup) -> np.ndarray:
    """psi: probability each gate is strictly positive."""
    shift = group.beta * np.log(-group.gamma / group.zeta)
    return _sigmoid(group.log_alpha - shift)


def sample_bernoulli(group: GateGroup, count: int, rng: np.random.Generator) -> np.ndarray:
    """(count, n_gates) binary sample matrix from the equivalent Bernoulli
    parameterization; never touches the gradient tape."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    psi = gate_active_prob(group)
    return (rng.random((count, len(group))) < psi).astype(np.float64)


def deterministic_gate(group: GateGroup) -> np.ndarray:
    """Inference-time gate value: clip(sigmoid(log_alpha)*(zeta-gamma)+gamma, 0, 1).

    Exactly zero iff sigmoid(log_alpha) <= -gamma/(zeta-gamma)."""
    s = _sigmoid(group.log_alpha)
    return np.clip(s * (group.zeta - group.gamma) + group.gamma, 0.0, 1.0)


def log_alpha_init(n: int, dropout_rate: float, rng: np.random.Generator,
                   noise_std: float = 0.01) -> np.ndarray:
    """Initial log_alpha matching a layer's original dropout rate."""
    if not 0.0 < dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in (0, 1), got {dropout_rate}")
    mean = np.log(1.0 - dropout_rate) - np.log(dropout_rate)
    return mean + noise_std * rng.standard_normal(n)
