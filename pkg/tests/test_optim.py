import numpy as np
import pytest

from flopnet.autodiff import Tensor
from flopnet.optim import AdamState


def params_of(*specs):
    return [(name, Tensor(np.array(vals, dtype=np.float64), requires_grad=True), kind)
            for name, vals, kind in specs]


def test_zero_gradient_no_decay_leaves_params_unchanged():
    ps = params_of(("w", [1.0, -2.0], "weight"), ("b", [0.5], "bias"))
    opt = AdamState(ps, weight_decay=0.0)
    opt.step({t.id: np.zeros_like(t.data) for _, t, _ in ps})
    np.testing.assert_array_equal(ps[0][1].data, [1.0, -2.0])
    np.testing.assert_array_equal(ps[1][1].data, [0.5])


def test_first_adam_step_is_minus_lr():
    # g = 1 constantly: bias-corrected m/sqrt(v) = 1 on step one
    ps = params_of(("w", [0.0], "weight"))
    opt = AdamState(ps, lr=1e-3)
    opt.step({ps[0][1].id: np.ones(1)})
    assert ps[0][1].data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_decoupled_weight_decay_only_on_weights():
    ps = params_of(("w", [2.0], "weight"), ("b", [2.0], "bias"), ("la", [2.0], "log_alpha"))
    opt = AdamState(ps, lr=0.1, weight_decay=0.5)
    zero = {t.id: np.zeros_like(t.data) for _, t, _ in ps}
    opt.step(zero)
    assert ps[0][1].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert ps[1][1].data[0] == 2.0
    assert ps[2][1].data[0] == 2.0


def test_log_alpha_never_decayed_over_many_steps():
    rng = np.random.default_rng(0)
    ps = params_of(("w", [1.0, 1.0], "weight"), ("la", [1.0, 1.0], "log_alpha"))
    opt = AdamState(ps, lr=1e-2, weight_decay=0.1)
    w, la = ps[0][1], ps[1][1]
    for _ in range(50):
        g = rng.standard_normal(2)
        before = la.data.copy()
        opt.step({w.id: g, la.id: np.zeros(2)})
        # log_alpha moves only by its own (zero) gradient: no decay drift
        np.testing.assert_array_equal(la.data, before)


def test_nan_gradient_names_parameter():
    ps = params_of(("conv1.weight", [1.0], "weight"))
    opt = AdamState(ps)
    with pytest.raises(FloatingPointError, match="conv1.weight"):
        opt.step({ps[0][1].id: np.array([np.nan])})


def test_missing_gradient_treated_as_zero():
    ps = params_of(("w", [1.0], "weight"))
    opt = AdamState(ps, weight_decay=0.0)
    opt.step({})
    assert ps[0][1].data[0] == 1.0


def test_ema_decay_zero_shadow_tracks_params():
    ps = params_of(("w", [3.0], "weight"))
    opt = AdamState(ps, ema_decay=0.0)
    opt.ema_update()
    ps[0][1].data[0] = 7.0
    opt.ema_update()
    assert opt.shadow_value(ps[0][1])[0] == 7.0


def test_ema_constant_params_fixed_point():
    ps = params_of(("w", [1.5], "weight"))
    opt = AdamState(ps, ema_decay=0.9)
    for _ in range(200):
        opt.ema_update()
    assert opt.shadow_value(ps[0][1])[0] == pytest.approx(1.5, rel=1e-12)


def test_ema_geometric_approach():
    # params jump 0 -> 1 at step 0; shadow after k updates = 1 - decay^k
    ps = params_of(("w", [0.0], "weight"))
    opt = AdamState(ps, ema_decay=0.999)
    opt.ema_update()  # shadow initialized at 0
    ps[0][1].data[0] = 1.0
    for k in range(1, 50):
        opt.ema_update()
        assert opt.shadow_value(ps[0][1])[0] == pytest.approx(1.0 - 0.999 ** k, rel=1e-9)


def test_swap_without_update_errors():
    opt = AdamState(params_of(("w", [1.0], "weight")))
    with pytest.raises(RuntimeError, match="before any ema_update"):
        opt.ema_swap_in()


def test_swap_in_out_restores_raw_params():
    ps = params_of(("w", [2.0], "weight"))
    opt = AdamState(ps, ema_decay=0.5)
    opt.ema_update()
    ps[0][1].data[0] = 4.0
    opt.ema_update()  # shadow = 3.0
    with opt.averaged_parameters():
        assert ps[0][1].data[0] == 3.0
    assert ps[0][1].data[0] == 4.0


def test_no_step_while_swapped():
    ps = params_of(("w", [1.0], "weight"))
    opt = AdamState(ps)
    opt.ema_update()
    opt.ema_swap_in()
    with pytest.raises(RuntimeError, match="swapped"):
        opt.step({})
    opt.ema_swap_in()


def test_shadow_never_receives_gradients():
    # stepping moves raw params, not the shadow
    ps = params_of(("w", [1.0], "weight"))
    opt = AdamState(ps, lr=0.5, ema_decay=0.9)
    opt.ema_update()
    shadow_before = opt.shadow_value(ps[0][1]).copy()
    opt.step({ps[0][1].id: np.ones(1)})
    np.testing.assert_array_equal(opt.shadow_value(ps[0][1]), shadow_before)


def test_ema_decay_validation():
    with pytest.raises(ValueError):
        AdamState(params_of(("w", [1.0], "weight")), ema_decay=1.0)
