import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from infrastructure_model import (
    SINGULAR_EPS,
    DerivedConstants,
    Incomes,
    NonFiniteError,
    SingularGradientError,
    SystemState,
    compute_incomes,
    derived_constants,
    harvest_private,
    harvest_shared,
)
from model_params import ModelParams
import politics

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Derivative:
    """状態の時間微分 (並びは SystemState と同じ)"""
    dI_s: float
    dI_p: Tuple[float, float]
    dl: Tuple[float, float]
    ds: Tuple[float, float]
    dtau: float
    dtau_hat: Tuple[float, float]
    dpi_hat: Tuple[float, float]
    dtau_check: Tuple[float, float]

    def to_vector(self) -> np.ndarray:
        return np.array([
            self.dI_s, self.dI_p[0], self.dI_p[1], self.dl[0], self.dl[1], self.ds[0], self.ds[1],
            self.dtau, self.dtau_hat[0], self.dtau_hat[1], self.dpi_hat[0], self.dpi_hat[1],
            self.dtau_check[0], self.dtau_check[1],
        ], dtype=float)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


def d_infrastructure(x: SystemState, inc: Incomes, p: ModelParams) -> Tuple[float, Tuple[float, float]]:
    """
    共有インフラは税収で、私的インフラは各グループの貯蓄で増え、どちらも delta で減耗する。
    私的インフラは収穫率が頭打ちになる上限 n_g/N * I_bar より先には積み増さない。
    """
    dI_s = p.mu * x.tau * (inc.Y_s_total + p.psi * inc.Y_p_total) - p.delta * x.I_s
    dI_p = []
    for g, grp in enumerate(p.groups):
        rate = grp.mu_p * x.s[g] * grp.n * inc.y_post[g] - p.delta * x.I_p[g]
        if rate > 0 and x.I_p[g] >= private_plateau(g, p):
            rate = 0.0
        dI_p.append(rate)
    return dI_s, tuple(dI_p)


def labor_bracket(x: SystemState, g: int, p: ModelParams, derived: Optional[DerivedConstants] = None) -> float:
    """共有インフラで働く場合と私的インフラで働く場合の税引後所得差 (1人あたり)"""
    grp = p.groups[g]
    shared = (1.0 - x.tau) * grp.phi * p.R * harvest_shared(x.I_s, p)
    private = (1.0 - p.psi * x.tau) * (grp.phi * p.R * harvest_private(x.I_p[g], g, p, derived) + p.w)
    return shared - private


def d_labor(x: SystemState, p: ModelParams, derived: Optional[DerivedConstants] = None) -> Tuple[float, float]:
    """労働配分のレプリケータ方程式"""
    d = derived or derived_constants(p)
    return tuple(
        p.beta_l * (1.0 - x.s[g]) * x.l[g] * (1.0 - x.l[g]) * labor_bracket(x, g, p, d)
        for g in range(2)
    )


def savings_gradient_B(x: SystemState, g: int, p: ModelParams, derived: Optional[DerivedConstants] = None) -> float:
    """
    貯蓄率を上げたときの消費の変化率を表す係数 B(s_g, l_g)。
    savings_decay_factor が False の場合は (1 - delta) の係数を落とす。
    """
    d = derived or derived_constants(p)
    grp = p.groups[g]
    k = grp.phi * p.R * (1.0 - p.psi * x.tau) * (1.0 - x.l[g]) * d.h_p * grp.mu_p * d.N
    c = p.I_bar - p.I_0
    if p.savings_decay_factor:
        c *= 1.0 - p.delta
    denom = c - x.s[g] * k
    if abs(denom) < SINGULAR_EPS:
        raise SingularGradientError(f"savings gradient denominator {denom:.3e} for group {g + 1}")
    return (k - c) / denom


def savings_ceiling(y_post_g: float, y0_g: float) -> float:
    """生存水準を割らずに貯蓄できる最大の貯蓄率 s^A"""
    if y_post_g <= y0_g:
        return 0.0
    return (y_post_g - y0_g) / y_post_g


def clamp_savings(ds: float, s_g: float, s_ceiling: float) -> float:
    """貯蓄率が [0, s^A] から出ないように変化率を射影する"""
    if ds > s_ceiling - s_g:
        return s_ceiling - s_g
    if ds < -s_g:
        return -s_g
    return ds


def private_plateau(g: int, p: ModelParams, derived: Optional[DerivedConstants] = None) -> float:
    """私的インフラの収穫率が h_p で頭打ちになる容量 n_g/N * I_bar"""
    d = derived or derived_constants(p)
    return d.n_tilde[g] * p.I_bar


def holding_savings_rate(x: SystemState, inc: Incomes, g: int, p: ModelParams) -> float:
    """私的インフラの減耗をちょうど補う貯蓄率 ([0, s^A] に収める)"""
    grp = p.groups[g]
    y_post = inc.y_post[g]
    if grp.mu_p <= 0 or y_post <= 0:
        return 0.0
    s_hold = p.delta * x.I_p[g] / (grp.mu_p * grp.n * y_post)
    return min(max(s_hold, 0.0), savings_ceiling(y_post, grp.y0))


def d_savings(x: SystemState, inc: Incomes, p: ModelParams,
              derived: Optional[DerivedConstants] = None) -> Tuple[float, float]:
    """
    傾斜区間では B に沿って、閾値以下では減少側の式で貯蓄率を動かす。
    上限でまだ積み増したい場合 (B > 0) は、容量を保つ貯蓄率へ寄せてその場に留める。
    """
    d = derived or derived_constants(p)
    rates = []
    for g, grp in enumerate(p.groups):
        y_post = inc.y_post[g]
        raw = -p.beta_s * y_post
        if x.I_p[g] > d.n_tilde[g] * p.I_0:
            try:
                gradient = savings_gradient_B(x, g, p, d)
            except SingularGradientError as e:
                logger.debug(f"{e}; 貯蓄率は減少側の式で計算します")
            else:
                if x.I_p[g] < private_plateau(g, p, d):
                    raw = p.beta_s * y_post * gradient
                elif gradient > 0:
                    raw = p.beta_s * y_post * (holding_savings_rate(x, inc, g, p) - x.s[g])
        rates.append(clamp_savings(raw, x.s[g], savings_ceiling(y_post, grp.y0)))
    return tuple(rates)


class ModelSystem:
    """
    パラメータを固定した右辺。derivative() は状態から全成分の微分を返す。
    """

    def __init__(self, p: ModelParams):
        self.p = p
        self.derived = derived_constants(p)

    def derivative(self, x: SystemState) -> Derivative:
        p = self.p
        d = self.derived
        inc = compute_incomes(x, p, d)
        dI_s, dI_p = d_infrastructure(x, inc, p)
        dl = d_labor(x, p, d)
        ds = d_savings(x, inc, p, d)
        dtau, dtau_hat, dpi_hat, dtau_check = politics.political_derivative(x, inc, p)
        deriv = Derivative(dI_s, dI_p, dl, ds, dtau, dtau_hat, dpi_hat, dtau_check)
        if not all(math.isfinite(v) for v in (dI_s, dtau) + dI_p + dl + ds + dtau_hat + dpi_hat + dtau_check):
            raise NonFiniteError(f"non-finite derivative at I_s={x.I_s}, tau={x.tau}")
        return deriv

    def rhs(self, y: np.ndarray, q_I: int) -> np.ndarray:
        return self.derivative(SystemState.from_vector(y, q_I)).to_vector()
