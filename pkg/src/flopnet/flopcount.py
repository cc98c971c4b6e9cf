"""FLOPs accounting under binary gate realizations, in expectation, and
statically.

Counting convention: one addition and one multiplication each count as a
FLOP, folded into the per-output-element terms

    conv:  (K_w * K_h * C_in_active + 1) * O_w * O_h * active_out
    fc:    (active_in + 1) * active_out

with O = floor((I - K + P) / stride) + 1 (P is total padding). Counts
depend only on gate support and geometry, never on weight values.
Pooling, activations, and residual adds are not counted.

Cross-layer coupling: a conv layer's active input channels come from the
upstream conv's active filters; a dense layer's active_in is the popcount
of its own input gates; a dense layer's active_out is the next gated
dense layer's active_in, or its full width, with the classifier pinned to
the class count. A dense layer with zero active inputs is dead and
contributes nothing (otherwise its bias term would survive an all-zero
realization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gates import gate_active_prob
from .layers import ArchSpec, Conv2d, Dense, GatedModel


def conv_out_dim(extent, kernel, pad_total, stride):
    if extent + pad_total < kernel:
        raise ValueError(
            f"kernel {kernel} larger than padded input {extent + pad_total}"
        )
    return (extent - kernel + pad_total) // stride + 1


def conv_flops(k_w, k_h, c_in_active, i_w, i_h, p_w, p_h, stride, active_out):
    """FLOPs of a 2-D convolution with c_in_active input channels and
    active_out live output filters."""
    if min(k_w, k_h, i_w, i_h) <= 0 or stride < 1:
        raise ValueError("conv dimensions must be positive and stride >= 1")
    if c_in_active < 0 or active_out < 0:
        raise ValueError("active counts must be >= 0")
    o_w = conv_out_dim(i_w, k_w, p_w, stride)
    o_h = conv_out_dim(i_h, k_h, p_h, stride)
    return (k_w * k_h * c_in_active + 1) * o_w * o_h * active_out


def fc_flops(active_in, active_out):
    if active_in < 0 or active_out < 0:
        raise ValueError("active counts must be >= 0")
    return (active_in + 1) * active_out


@dataclass
class LedgerEntry:
    layer: str
    kind: str  # conv2d | dense
    inputs: dict
    active_out: float
    flops: float


@dataclass
class FlopsLedger:
    entries: list = field(default_factory=list)

    @property
    def total(self):
        return sum(e.flops for e in self.entries)

    def to_dict(self):
        return {
            "layers": [
                {"layer": e.layer, "kind": e.kind, **e.inputs,
                 "active_out": e.active_out, "flops": e.flops}
                for e in self.entries
            ],
            "total": self.total,
        }

    def format_table(self):
        rows = [("layer", "kind", "formula inputs", "active_out", "flops")]
        for e in self.entries:
            ins = " ".join(f"{k}={v}" for k, v in e.inputs.items())
            rows.append((e.layer, e.kind, ins, f"{e.active_out:g}", f"{e.flops:,.6g}"
                         if isinstance(e.flops, float) else f"{e.flops:,}"))
        rows.append(("total", "", "", "", f"{self.total:,.6g}"
                     if isinstance(self.total, float) else f"{self.total:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


# --- accounting program ----------------------------------------------------
#
# The model's conv/dense structure is lowered once into a list of steps,
# then evaluated for scalar popcounts (a single realization), for psi sums
# (expectation), or for whole matrices of sampled counts (the score
# function estimator's S-sample batch). Ungated layers (e.g. everything in
# a structurally pruned model) count at their full width.


@dataclass(frozen=True)
class _ConvStep:
    name: str
    k_w: int
    k_h: int
    i_w: int
    i_h: int
    p_w: int
    p_h: int
    stride: int
    width: int  # output filters
    gated: bool
    c_in_fixed: int  # input channel count when not fed by an upstream conv; else -1


@dataclass(frozen=True)
class _DenseStep:
    name: str
    width: int  # input neurons
    out_width: int  # fan-out; overridden by the next dense step's count when gated
    gated: bool
    next_is_gated_dense: bool


def accounting_program(model: GatedModel):
    """Lower a model to accounting steps over its conv and dense layers."""
    counted = [l for l in model.layers if isinstance(l, (Conv2d, Dense))]
    steps = []
    seen_conv = False
    for i, layer in enumerate(counted):
        if isinstance(layer, Conv2d):
            ph, pw = _split_pad(layer.padding)
            steps.append(_ConvStep(
                name=layer.name, k_w=layer.kernel[1], k_h=layer.kernel[0],
                i_w=layer.in_w, i_h=layer.in_h, p_w=pw, p_h=ph,
                stride=layer.stride, width=layer.out_channels, gated=layer.gated,
                c_in_fixed=-1 if seen_conv else layer.in_channels,
            ))
            seen_conv = True
        else:
            nxt = counted[i + 1] if i + 1 < len(counted) else None
            # for the final classifier, out_features equals the class count
            steps.append(_DenseStep(
                name=layer.name, width=layer.in_features,
                out_width=layer.out_features, gated=layer.gated,
                next_is_gated_dense=isinstance(nxt, Dense) and nxt.gated,
            ))
    return steps


def _split_pad(padding):
    if isinstance(padding, int):
        return padding, padding
    return padding


def _step_values(steps, counts):
    """Per-step active counts: gated steps consume `counts` in order,
    ungated steps count their full width."""
    n_gated = sum(1 for s in steps if s.gated)
    if n_gated != len(counts):
        raise ValueError(f"expected {n_gated} gated counts, got {len(counts)}")
    it = iter(counts)
    return [next(it) if step.gated else step.width for step in steps]


def flops_from_counts(steps, counts):
    """Total FLOPs given active-gate counts, one array (or scalar) per
    *gated* step in order.

    Vectorizes over leading sample axes, so `counts` may hold (S,)-shaped
    integer arrays for S simultaneous Bernoulli realizations.
    """
    vals = _step_values(steps, counts)
    total = 0
    prev_conv = None
    for i, step in enumerate(steps):
        c = vals[i]
        if isinstance(step, _ConvStep):
            c_in = step.c_in_fixed if step.c_in_fixed >= 0 else prev_conv
            o_w = conv_out_dim(step.i_w, step.k_w, step.p_w, step.stride)
            o_h = conv_out_dim(step.i_h, step.k_h, step.p_h, step.stride)
            total = total + (step.k_w * step.k_h * c_in + 1) * o_w * o_h * c
            prev_conv = c
        else:
            out = vals[i + 1] if step.next_is_gated_dense else step.out_width
            total = total + np.where(c > 0, (c + 1) * out, 0)
    return total


def _entries_from_counts(steps, counts):
    vals = _step_values(steps, counts)
    entries = []
    prev = None
    for i, step in enumerate(steps):
        c = vals[i]
        if isinstance(step, _ConvStep):
            c_in = step.c_in_fixed if step.c_in_fixed >= 0 else prev
            flops = conv_flops(step.k_w, step.k_h, c_in, step.i_w, step.i_h,
                               step.p_w, step.p_h, step.stride, c)
            entries.append(LedgerEntry(
                layer=step.name, kind="conv2d",
                inputs={"k_w": step.k_w, "k_h": step.k_h, "c_in_active": c_in,
                        "i_w": step.i_w, "i_h": step.i_h, "p_w": step.p_w,
                        "p_h": step.p_h, "stride": step.stride},
                active_out=c, flops=flops,
            ))
            prev = c
        else:
            out = vals[i + 1] if step.next_is_gated_dense else step.out_width
            entries.append(LedgerEntry(
                layer=step.name, kind="dense", inputs={"active_in": c},
                active_out=out, flops=fc_flops(c, out) if c > 0 else 0,
            ))
    return entries


def realization_counts(model, realization):
    """Per-step active counts from a {layer name: binary vector} realization."""
    counts = []
    for layer in model.gated_layers():
        z = np.asarray(realization[layer.name])
        n = layer.out_channels if isinstance(layer, Conv2d) else layer.in_features
        if z.shape != (n,):
            raise ValueError(
                f"{layer.name}: realization shape {z.shape} does not match {n} gates"
            )
        if not np.all((z == 0) | (z == 1)):
            raise ValueError(f"{layer.name}: realization entries must be 0 or 1")
        counts.append(int(z.sum()))
    return counts


def realization_from_counts(model, active_counts):
    """Binary realization with the first k gates of each layer on; FLOPs
    depend only on counts, so this reproduces any realization with the
    same per-layer popcounts."""
    gated = model.gated_layers()
    if len(active_counts) != len(gated):
        raise ValueError(f"expected {len(gated)} counts, got {len(active_counts)}")
    out = {}
    for layer, k in zip(gated, active_counts):
        n = layer.out_channels if isinstance(layer, Conv2d) else layer.in_features
        if not 0 <= k <= n:
            raise ValueError(f"{layer.name}: count {k} outside [0, {n}]")
        z = np.zeros(n)
        z[:k] = 1.0
        out[layer.name] = z
    return out


def network_flops(model: GatedModel, realization) -> FlopsLedger:
    """Ledger for one binary gate realization (dict: layer name -> z)."""
    steps = accounting_program(model)
    counts = realization_counts(model, realization)
    return FlopsLedger(entries=_entries_from_counts(steps, counts))


def expected_flops(model: GatedModel) -> float:
    """Analytic expectation of the FLOPs count under independent Bernoulli
    gates: every popcount is replaced by its mean (sum of psi), and
    products across layers factorize by independence.

    The factorized form ignores the dense dead-layer event (all input
    gates sampling to zero at once), whose probability is ~(1-psi)^n and
    which sits far inside the Monte-Carlo tolerance at any realistic
    layer width."""
    steps = accounting_program(model)
    means = [float(gate_active_prob(l.gate_group()).sum()) for l in model.gated_layers()]
    return float(flops_from_counts(steps, means))


def static_flops(arch, penalized_only=False) -> FlopsLedger:
    """All-gates-on ledger for a GatedModel, or the ledger of an ArchSpec's
    (optionally penalized-only) convolutions."""
    if isinstance(arch, GatedModel):
        ones = {l.name: np.ones(l.out_channels if isinstance(l, Conv2d) else l.in_features)
                for l in arch.gated_layers()}
        return network_flops(arch, ones)
    if isinstance(arch, ArchSpec):
        entries = []
        for c in arch.convs:
            if penalized_only and not c.penalized:
                continue
            flops = conv_flops(c.k_w, c.k_h, c.c_in, c.i_w, c.i_h,
                               c.p_w, c.p_h, c.stride, c.c_out)
            entries.append(LedgerEntry(
                layer=c.name, kind="conv2d",
                inputs={"k_w": c.k_w, "k_h": c.k_h, "c_in_active": c.c_in,
                        "i_w": c.i_w, "i_h": c.i_h, "p_w": c.p_w, "p_h": c.p_h,
                        "stride": c.stride},
                active_out=c.c_out, flops=flops,
            ))
        return FlopsLedger(entries=entries)
    raise TypeError(f"expected GatedModel or ArchSpec, got {type(arch).__name__}")


def support_realization(model: GatedModel):
    """Binary realization from the deterministic gates' support."""
    from .gates import deterministic_gate

    return {l.name: (deterministic_gate(l.gate_group()) > 0).astype(np.float64)
            for l in model.gated_layers()}


def sample_flops(model: GatedModel, count, rng):
    """FLOPs totals of `count` i.i.d. Bernoulli realizations, vectorized."""
    from .gates import sample_bernoulli

    steps = accounting_program(model)
    counts = []
    for layer in model.gated_layers():
        z = sample_bernoulli(layer.gate_group(), count, rng)
        counts.append(z.sum(axis=1).astype(np.int64))
    return flops_from_counts(steps, counts), counts
