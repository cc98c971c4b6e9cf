"""Training objective: reparameterized NLL plus the clipped FLOPs penalty.

The loss has two routes. The data term backpropagates through one hard
concrete sample per gate group (reparameterization). The penalty term
lambda_f * max(0, flops - target) is a black box in the gates' support,
so its gradient w.r.t. log_alpha uses the score function estimator over
S Bernoulli realizations:

    grad_j = (1/S) sum_s (f(z_s) - b) * (z_sj - psi_j)

where z_j - psi_j is the Bernoulli score in the log_alpha domain
(d psi / d log_alpha = psi (1 - psi) cancels the likelihood-ratio
denominator). Weights never receive penalty gradient: the count depends
only on the support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flopcount
from . import layers as L
from .gates import gate_active_prob


@dataclass
class PenaltyConfig:
    lambda_f: float
    target: int
    sample_count: int = 1000
    baseline: str = "none"  # none | sample_mean

    def __post_init__(self):
        if self.lambda_f < 0:
            raise ValueError(f"lambda_f must be >= 0, got {self.lambda_f}")
        if self.target < 0:
            raise ValueError(f"target must be >= 0, got {self.target}")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.baseline not in ("none", "sample_mean"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


@dataclass
class ObjectiveReport:
    """Per-step decomposition of the objective."""

    nll: float = 0.0
    penalty_value: float = 0.0  # lambda_f * mean hinge over the S samples
    sampled_flops_mean: float = 0.0
    sampled_flops_min: float = 0.0
    sampled_flops_max: float = 0.0
    hinge_active_fraction: float = 0.0
    grad_logalpha_norm: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)


def hinge_penalty(flops, target):
    """max(0, flops - target); the penalty is zero at or under the target."""
    return max(0, flops - target)


def score_function_gradient(psis, payoff, samples_by_group):
    """Score-function gradient of E[payoff] w.r.t. each group's log_alpha.

    psis: list of per-group psi vectors; samples_by_group: list of (S, n)
    binary matrices drawn from Bernoulli(psi); payoff: (S,) array of
    f(z_s) (advantage-adjusted if a baseline is in play). Returns one
    gradient vector per group.
    """
    s_count = payoff.shape[0]
    grads = []
    for psi, z in zip(psis, samples_by_group):
        grads.append((payoff @ (z - psi)) / s_count)
    return grads


def _advantage(payoff, baseline, s_count):
    if baseline == "none" or s_count == 1:
        return payoff
    # leave-one-out form of the sample-mean baseline keeps the estimator
    # exactly unbiased: (f_s - mean f) * S / (S - 1)
    return (payoff - payoff.mean()) * (s_count / (s_count - 1.0))


def reinforce_grad_logalpha(model: L.GatedModel, cfg: PenaltyConfig, rng):
    """Penalty gradient for every gate group plus sampling diagnostics.

    Draws S Bernoulli support realizations, prices each with the FLOPs
    ledger, applies the hinge at the target, and returns
    ({layer name: grad vector}, stats dict).
    """
    gated = model.gated_layers()
    steps = flopcount.accounting_program(model)
    psis = [gate_active_prob(l.gate_group()) for l in gated]
    s_count = cfg.sample_count

    samples = [(rng.random((s_count, len(psi))) < psi).astype(np.float64) for psi in psis]
    counts = [z.sum(axis=1).astype(np.int64) for z in samples]
    totals = flopcount.flops_from_counts(steps, counts)
    hinge = np.maximum(0, totals - cfg.target)
    payoff = cfg.lambda_f * hinge

    adv = _advantage(payoff, cfg.baseline, s_count)
    grads = score_function_gradient(psis, adv, samples)
    stats = {
        "penalty_value": float(payoff.mean()),
        "sampled_flops_mean": float(totals.mean()),
        "sampled_flops_min": float(totals.min()),
        "sampled_flops_max": float(totals.max()),
        "hinge_active_fraction": float((hinge > 0).mean()),
    }
    return {l.name: g for l, g in zip(gated, grads)}, stats


def training_loss_step(model: L.GatedModel, batch, cfg: PenaltyConfig, rng):
    """One optimization step's gradients and diagnostics.

    Returns (loss value, {tensor id: gradient}, ObjectiveReport). The NLL
    flows through the tape to weights and (reparameterized) log_alpha;
    the penalty's score-function gradient is added to log_alpha only.
    The report's gradient norm covers the combined log_alpha gradient.
    """
    images, labels = batch
    params = model.parameters()
    loss, tape = L.forward_train(model, images, labels, rng)
    grads = tape.backward(loss, params=[t for _, t, _ in params])

    report = ObjectiveReport(nll=float(loss.data))
    if cfg.lambda_f > 0:
        rgrads, stats = reinforce_grad_logalpha(model, cfg, rng.spawn(1)[0])
        for layer in model.gated_layers():
            g = grads[layer.log_alpha.id]
            grads[layer.log_alpha.id] = g + rgrads[layer.name].astype(g.dtype)
        for k, v in stats.items():
            setattr(report, k, v)

    sq = 0.0
    for layer in model.gated_layers():
        sq += float((grads[layer.log_alpha.id].astype(np.float64) ** 2).sum())
    report.grad_logalpha_norm = float(np.sqrt(sq))
    return float(loss.data), grads, report
