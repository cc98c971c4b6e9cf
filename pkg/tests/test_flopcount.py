import json

import numpy as np
import pytest

from flopnet import flopcount as fc
from flopnet import layers as L


def lenet(seed=None):
    rng = None if seed is None else np.random.default_rng(seed)
    return L.build_lenet5_caffe(rng)


def test_conv_flops_examples():
    # pruned LeNet conv2 and full conv1 from the layer formulas
    assert fc.conv_flops(5, 5, 3, 12, 12, 0, 0, 1, 13) == 76 * 64 * 13 == 63232
    assert fc.conv_flops(5, 5, 1, 28, 28, 0, 0, 1, 20) == 26 * 576 * 20 == 299520
    assert fc.conv_flops(5, 5, 3, 12, 12, 0, 0, 1, 0) == 0


def test_conv_flops_stride():
    # output dim floor((I - K + P)/stride) + 1
    assert fc.conv_flops(3, 3, 16, 32, 32, 2, 2, 2, 8) == (9 * 16 + 1) * 16 * 16 * 8


def test_conv_flops_errors():
    with pytest.raises(ValueError, match="larger than padded"):
        fc.conv_flops(9, 9, 1, 4, 4, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        fc.conv_flops(3, 3, -1, 8, 8, 0, 0, 1, 1)


def test_fc_flops_examples():
    assert fc.fc_flops(208, 500) == 104500
    assert fc.fc_flops(499, 10) == 5000
    assert fc.fc_flops(800, 0) == 0
    with pytest.raises(ValueError):
        fc.fc_flops(-1, 5)


TABLE1 = [
    # (conv1, conv2, fc1-in, fc2-in) active counts -> exact total, paper's rounding
    ((3, 13, 208, 500), 217670, 218_000),
    ((3, 8, 128, 499), 153211, 153_000),
    ((2, 7, 112, 478), 111604, 111_000),
]


@pytest.mark.parametrize("pattern,total,rounded", TABLE1)
def test_lenet_pruned_flops_reconstruction(pattern, total, rounded):
    m = lenet()
    r = fc.realization_from_counts(m, pattern)
    ledger = fc.network_flops(m, r)
    assert ledger.total == total
    assert abs(ledger.total - rounded) / rounded < 0.01


def test_table1_t400k_row_breakdown():
    m = lenet()
    ledger = fc.network_flops(m, fc.realization_from_counts(m, (3, 13, 208, 500)))
    by_layer = {e.layer: e.flops for e in ledger.entries}
    assert by_layer == {"conv1": 44928, "conv2": 63232, "fc1": 104500, "fc2": 5010}


def test_all_zero_realization():
    m = lenet()
    ledger = fc.network_flops(m, fc.realization_from_counts(m, (0, 0, 0, 0)))
    assert ledger.total == 0


def test_static_flops_lenet_full():
    ledger = fc.static_flops(lenet())
    assert ledger.total == 2_308_230
    by_layer = {e.layer: e.flops for e in ledger.entries}
    assert by_layer == {"conv1": 299520, "conv2": 1603200, "fc1": 400500, "fc2": 5010}


def test_network_flops_all_ones_equals_static():
    m = lenet(seed=0)
    ones = fc.realization_from_counts(m, (20, 50, 800, 500))
    assert fc.network_flops(m, ones).total == fc.static_flops(m).total


def test_support_only_dependence():
    # changing weight values never changes the count
    m = lenet(seed=1)
    r = fc.realization_from_counts(m, (5, 9, 300, 200))
    before = fc.network_flops(m, r).total
    for name, t, kind in m.parameters():
        if kind != "log_alpha":
            t.data[...] = np.random.default_rng(2).standard_normal(t.data.shape)
    assert fc.network_flops(m, r).total == before


def test_monotone_in_active_gates():
    m = lenet()
    rng = np.random.default_rng(3)
    base = [int(rng.integers(0, n)) for n in (20, 50, 800, 500)]
    total0 = fc.network_flops(m, fc.realization_from_counts(m, base)).total
    for i in range(4):
        bumped = list(base)
        bumped[i] += 1
        t = fc.network_flops(m, fc.realization_from_counts(m, bumped)).total
        assert t >= total0


def test_realization_validation():
    m = lenet()
    bad = fc.realization_from_counts(m, (20, 50, 800, 500))
    bad["conv1"] = bad["conv1"][:10]
    with pytest.raises(ValueError, match="conv1"):
        fc.network_flops(m, bad)
    bad2 = fc.realization_from_counts(m, (20, 50, 800, 500))
    bad2["fc1"] = bad2["fc1"] * 0.5
    with pytest.raises(ValueError, match="0 or 1"):
        fc.network_flops(m, bad2)


def test_expected_flops_degenerate_gates():
    m = lenet()
    for l in m.gated_layers():
        l.log_alpha.data[:] = 40.0  # psi -> 1
    want = fc.network_flops(m, fc.realization_from_counts(m, (20, 50, 800, 500))).total
    assert fc.expected_flops(m) == pytest.approx(want, rel=1e-9)


def test_expected_flops_single_fc_layer():
    # 10 inputs at psi=0.5 into 10 ungated outputs: (0.5*10 + 1) * 10 = 60
    import math

    from flopnet import autodiff as ad

    la = (2.0 / 3.0) * math.log(0.1 / 1.1)  # psi = 0.5 under default stretch
    m = L.GatedModel(
        [L.Dense("fc", ad.Tensor(np.zeros((10, 10)), requires_grad=True),
                 ad.Tensor(np.zeros(10), requires_grad=True),
                 log_alpha=ad.Tensor(np.full(10, la), requires_grad=True))],
        input_shape=(10,), num_classes=10,
    )
    assert fc.expected_flops(m) == pytest.approx(60.0, rel=1e-9)


def test_expected_flops_matches_monte_carlo():
    m = lenet(seed=4)  # init-state gates
    analytic = fc.expected_flops(m)
    totals, _ = fc.sample_flops(m, 100_000, np.random.default_rng(5))
    mc = totals.mean()
    assert abs(analytic - mc) / mc < 0.005


def test_sample_flops_matches_network_flops_per_sample():
    # the vectorized path and the ledger path must agree realization by
    # realization
    m = lenet(seed=6)
    rng = np.random.default_rng(7)
    totals, counts = fc.sample_flops(m, 64, rng)
    for s in range(64):
        pattern = [int(c[s]) for c in counts]
        assert totals[s] == fc.network_flops(m, fc.realization_from_counts(m, pattern)).total


def test_wrn_penalized_static_flops():
    spec = L.build_wrn_28_10_spec()
    ledger = fc.static_flops(spec, penalized_only=True)
    assert ledger.total == 5_216_337_920
    assert abs(ledger.total - 5.9e9) / 5.9e9 < 0.15


def test_wrn_zero_penalized_contribution():
    spec = L.ArchSpec(name="none", convs=tuple(
        c.__class__(**{**c.__dict__, "penalized": False}) for c in L.build_wrn_28_10_spec().convs
    ))
    assert fc.static_flops(spec, penalized_only=True).total == 0


def test_empty_spec():
    assert fc.static_flops(L.ArchSpec(name="empty", convs=())).total == 0


def test_ledger_serialization_and_table():
    ledger = fc.static_flops(lenet())
    d = ledger.to_dict()
    assert d["total"] == 2_308_230
    assert len(d["layers"]) == 4
    json.dumps(d)  # must be JSON-serializable
    table = ledger.format_table()
    assert "conv1" in table and "2,308,230" in table


def test_deterministic_support_realization():
    m = lenet(seed=8)
    m.layers[0].log_alpha.data[:3] = -40.0
    sup = fc.support_realization(m)
    assert sup["conv1"][:3].sum() == 0
    assert sup["conv1"][3:].sum() == 17
