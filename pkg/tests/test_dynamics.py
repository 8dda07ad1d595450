from dataclasses import replace

import numpy as np
import pytest

from dynamics import (
    ModelSystem,
    clamp_savings,
    d_infrastructure,
    d_labor,
    d_savings,
    holding_savings_rate,
    labor_bracket,
    private_plateau,
    savings_ceiling,
    savings_gradient_B,
)
from infrastructure_model import SingularGradientError, compute_incomes, initial_state, maintenance_tax
from model_params import default_params


def _full_shared(p):
    return initial_state(p, l=(1.0, 1.0), I_p_frac=(0.0, 0.0), s=(0.0, 0.0))


def _collapse(p):
    return initial_state(p, l=(0.0, 0.0), I_p_frac=(0.0, 0.0), s=(0.0, 0.0), I_s=0.0)


def test_full_shared_is_a_fixed_point():
    """共有インフラが上限・全員参加・維持税率 0.1 の状態は非政治成分の不動点"""
    p = default_params()
    deriv = ModelSystem(p).derivative(_full_shared(p))
    v = deriv.to_vector()
    assert np.max(np.abs(v)) < 1e-8


def test_collapse_is_a_fixed_point():
    p = default_params()
    deriv = ModelSystem(p).derivative(_collapse(p))
    assert np.max(np.abs(deriv.to_vector())) < 1e-8


def _holding(p, x):
    """エリートの貯蓄率を私的インフラが減耗分だけ補われる値にそろえる"""
    s1 = holding_savings_rate(x, compute_incomes(x, p), 0, p)
    return replace(x, s=(s1, 0.0))


def _non_political(deriv):
    return np.array(deriv.to_vector()[:7])


def test_elites_abandon_is_a_fixed_point():
    """共有インフラなし・エリートは私的インフラ上限・非エリートは生存水準 (w = y0) で止まる"""
    p = default_params()
    x = _holding(p, initial_state(p, l=(0.0, 0.0), I_p_frac=(1.0, 0.0), s=(0.0, 0.0), I_s=0.0, tau=0.0))
    assert x.I_p[0] == pytest.approx(0.6)
    deriv = ModelSystem(p).derivative(x)
    assert np.max(np.abs(_non_political(deriv))) < 1e-8


@pytest.mark.parametrize("psi", [0, 1])
def test_distinct_societies_is_a_fixed_point(psi):
    """非エリートだけで共有インフラを維持し、エリートは私的インフラ上限にいる"""
    p = default_params(psi=psi)
    tau = maintenance_tax(p, labor=(0.0, 1.0))
    x = _holding(p, initial_state(p, l=(0.0, 1.0), I_p_frac=(1.0, 0.0), s=(0.0, 0.0), tau=tau))
    deriv = ModelSystem(p).derivative(x)
    assert abs(deriv.dI_s) < 1e-8
    assert max(abs(v) for v in deriv.dl) < 1e-8
    assert max(abs(v) for v in deriv.dI_p) < 1e-8
    assert max(abs(v) for v in deriv.ds) < 1e-8


def test_infrastructure_depreciates_without_revenue():
    p = default_params()
    x = initial_state(p, tau=0.0)
    dI_s, dI_p = d_infrastructure(x, compute_incomes(x, p), p)
    assert dI_s == pytest.approx(-p.delta * x.I_s)
    # エリートは貯蓄しているので私的インフラは増える
    assert dI_p[0] > -p.delta * x.I_p[0]
    assert dI_p[1] == 0.0


def test_labor_moves_towards_shared_when_it_pays_more():
    p = default_params()
    x = initial_state(p)
    assert labor_bracket(x, 1, p) > 0
    dl = d_labor(x, p)
    assert dl[1] > 0


def test_labor_moves_away_from_damaged_shared_infrastructure():
    """共有インフラが閾値以下なら共有側の所得は0で、労働は私的側へ動く"""
    p = default_params()
    x = initial_state(p, I_s=0.2, I_p_frac=(1.0, 0.0))
    assert labor_bracket(x, 0, p) < 0
    assert d_labor(x, p)[0] < 0


def test_labor_replicator_vanishes_at_the_edges():
    p = default_params()
    x = initial_state(p, l=(0.0, 1.0))
    assert d_labor(x, p) == (0.0, 0.0)


def test_savings_ceiling():
    assert savings_ceiling(1.0, 0.1) == pytest.approx(0.9)
    assert savings_ceiling(0.1, 0.1) == 0.0
    assert savings_ceiling(0.05, 0.1) == 0.0


def test_clamp_savings():
    assert clamp_savings(0.5, 0.2, 0.3) == pytest.approx(0.1)
    assert clamp_savings(-0.5, 0.2, 0.3) == pytest.approx(-0.2)
    assert clamp_savings(0.05, 0.2, 0.3) == 0.05


def test_savings_gradient_decay_factor_toggle():
    """(1 - delta) の係数の有無で B が変わる"""
    x = initial_state(default_params())
    with_factor = savings_gradient_B(x, 0, default_params())
    without = savings_gradient_B(x, 0, default_params(savings_decay_factor=False))
    assert with_factor != pytest.approx(without)


def test_savings_fall_when_private_capacity_is_outside_the_ramp():
    """上限にあっても B < 0 (共有側で働いている) なら貯蓄率は下がる"""
    p = default_params()
    x = initial_state(p, I_p_frac=(1.0, 0.0), s=(0.1, 0.0))
    ds = d_savings(x, compute_incomes(x, p), p)
    assert ds[0] < 0
    assert ds[1] == 0.0


def test_private_capacity_is_held_at_the_plateau():
    """上限で B > 0 なら積み増しは止まり、貯蓄率は容量を保つ値へ向かう"""
    p = default_params()
    x = initial_state(p, l=(0.2, 0.9), I_p_frac=(1.0, 0.0), s=(0.1, 0.0))
    inc = compute_incomes(x, p)
    assert x.I_p[0] == pytest.approx(private_plateau(0, p))
    assert savings_gradient_B(x, 0, p) > 0

    s_hold = holding_savings_rate(x, inc, 0, p)
    assert 0 < s_hold < x.s[0]
    dI_s, dI_p = d_infrastructure(x, inc, p)
    assert dI_p[0] == 0.0
    ds = d_savings(x, inc, p)
    assert ds[0] == pytest.approx(p.beta_s * inc.y_post[0] * (s_hold - x.s[0]))

    low = replace(x, s=(0.5 * s_hold, 0.0))
    assert d_infrastructure(low, inc, p)[1][0] < 0
    assert d_savings(low, inc, p)[0] > 0


def test_savings_follow_gradient_just_below_the_plateau():
    p = default_params()
    x = initial_state(p, l=(0.2, 0.9), I_p_frac=(0.99, 0.0), s=(0.1, 0.0))
    inc = compute_incomes(x, p)
    ds = d_savings(x, inc, p)
    assert ds[0] == pytest.approx(p.beta_s * inc.y_post[0] * savings_gradient_B(x, 0, p))


def _believed_consumption(x, p, g, s_new):
    """
    貯蓄率を s_new にしたときの消費。私的インフラだけが貯蓄の増分に応じて変わると見込む
    (I_p = I_p + mu_p n (s y' - s0 y'0) の不動点)。
    """
    grp = p.groups[g]
    y_base = compute_incomes(x, p).y_post[g]
    base = grp.mu_p * grp.n * x.s[g] * y_base
    y = y_base
    for _ in range(100):
        I_p = list(x.I_p)
        I_p[g] = x.I_p[g] + grp.mu_p * grp.n * s_new * y - base
        y = compute_incomes(replace(x, I_p=tuple(I_p)), p).y_post[g]
    return (1.0 - s_new) * y


@pytest.mark.parametrize("l1", [0.9, 0.3])
def test_savings_gradient_matches_finite_difference_of_consumption(l1):
    """y' B は見込みの消費を貯蓄率で数値微分したものと符号・大きさとも一致する"""
    p = default_params(savings_decay_factor=False)
    x = initial_state(p, l=(l1, 0.9))
    eps = 1e-6
    fd = (_believed_consumption(x, p, 0, x.s[0] + eps) - _believed_consumption(x, p, 0, x.s[0] - eps)) / (2 * eps)
    analytic = compute_incomes(x, p).y_post[0] * savings_gradient_B(x, 0, p)
    assert np.sign(fd) == np.sign(analytic)
    assert fd == pytest.approx(analytic, rel=1e-4)


def test_savings_gradient_sign_depends_on_private_labor():
    p = default_params(savings_decay_factor=False)
    assert savings_gradient_B(initial_state(p, l=(0.9, 0.9)), 0, p) < 0
    assert savings_gradient_B(initial_state(p, l=(0.3, 0.9)), 0, p) > 0


def test_savings_fall_back_when_gradient_is_singular(mocker):
    """勾配の分母が特異なら減少側の式を使う"""
    p = default_params()
    x = initial_state(p, s=(0.5, 0.0))
    mocker.patch("dynamics.savings_gradient_B", side_effect=SingularGradientError("singular"))
    inc = compute_incomes(x, p)
    ds = d_savings(x, inc, p)
    assert ds[0] == pytest.approx(-p.beta_s * inc.y_post[0])


def test_savings_never_exceed_subsistence_ceiling():
    p = default_params()
    x = initial_state(p, s=(0.9, 0.0))
    inc = compute_incomes(x, p)
    ceiling = savings_ceiling(inc.y_post[0], p.groups[0].y0)
    ds = d_savings(x, inc, p)
    assert x.s[0] + ds[0] <= ceiling + 1e-12


def test_no_politics_freezes_tax():
    p = default_params()
    x = replace(initial_state(p), I_s=1.5)
    deriv = ModelSystem(p).derivative(x)
    assert deriv.dtau == 0.0
    assert deriv.dtau_hat == (0.0, 0.0)
    assert deriv.dtau_check == (0.0, 0.0)
    assert deriv.is_finite()


def test_rhs_matches_derivative():
    p = default_params(variant="PolComp-Eq")
    system = ModelSystem(p)
    x = initial_state(p, I_s=2.0, incumbent=2)
    assert np.allclose(system.rhs(x.to_vector(), 2), system.derivative(x).to_vector())
