import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

from infrastructure_model import (
    SINGULAR_EPS,
    Incomes,
    SingularGradientError,
    SystemState,
    compute_incomes,
)
from model_params import Cognition, ModelParams, PoliticsKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaxBounds:
    """税率の上限。tau_bar_1 は非エリートの生存水準、tau_bar_2 は望ましい最大容量から決まる"""
    tau_bar_1: float
    tau_bar_2: float

    @property
    def upper(self) -> float:
        return min(self.tau_bar_1, self.tau_bar_2)


@dataclass(frozen=True)
class ElectionOutcome:
    votes_for_1: float
    winner: int
    ballots: Tuple[int, int]


# --- 税の選好 (DirectAgg) ---

def tax_benefit_B_tau(x: SystemState, inc: Incomes, p: ModelParams, g: int) -> float:
    """税率を上げたときに共有インフラの拡大を通じて増える所得 (Bτ)"""
    grp = p.groups[g]
    denom = (p.I_bar - p.I_0) - p.mu * x.tau * inc.L_tilde * p.R * p.h
    if abs(denom) < SINGULAR_EPS:
        raise SingularGradientError(f"tax gradient denominator {denom:.3e} for group {g + 1}")
    revenue = inc.Y_s_total + p.psi * inc.Y_p_total
    return grp.phi * p.R * x.l[g] * (1.0 - x.tau) * p.mu * p.h * revenue / denom


def cold_tax_gradient(x: SystemState, inc: Incomes, p: ModelParams, g: int) -> float:
    """
    Cold cognition: 観測された消費の税率勾配に沿って選好を動かす。
    共有インフラが傾斜区間にないときは増税の便益がなく、税負担の分だけ下がる。
    """
    burden = inc.y_s[g] + p.psi * inc.y_p[g]
    inner = -burden
    if p.I_0 < x.I_s < p.I_bar:
        try:
            inner = tax_benefit_B_tau(x, inc, p, g) - burden
        except SingularGradientError as e:
            logger.debug(f"{e}; 便益項なしで計算します")
    return p.beta_tau1 * (1.0 - x.s[g]) * inner


def hot_tax_update(x: SystemState, inc: Incomes, p: ModelParams, g: int) -> float:
    """Hot cognition: 消費の誤差に比例して、イデオロギーの向き theta_g に選好を動かす"""
    return p.beta_tau2 * p.groups[g].theta * inc.e[g]


def tax_preference_rate(x: SystemState, inc: Incomes, p: ModelParams, g: int) -> float:
    cognition = p.variant.cognition
    if cognition == Cognition.HOT:
        return hot_tax_update(x, inc, p, g)
    if cognition == Cognition.MIXED:
        return cold_tax_gradient(x, inc, p, g) + hot_tax_update(x, inc, p, g)
    return cold_tax_gradient(x, inc, p, g)


def d_expected_consumption(x: SystemState, inc: Incomes, p: ModelParams, g: int) -> float:
    return p.xi * (inc.pi[g] - x.pi_hat[g])


# --- 税率の制約 ---

def tax_bounds(x: SystemState, inc: Incomes, p: ModelParams) -> TaxBounds:
    y2 = inc.y_s[1] + inc.y_p[1]
    y0 = p.groups[1].y0
    tau_bar_1 = (y2 - y0) / y2 if y2 > y0 else 0.0

    revenue = p.mu * (inc.Y_s_total + p.psi * inc.Y_p_total)
    if revenue <= 0:
        tau_bar_2 = math.inf
    else:
        tau_bar_2 = max((p.I_bar * (1.0 + p.f_s) - (1.0 - p.delta) * x.I_s) / revenue, 0.0)
    return TaxBounds(tau_bar_1, tau_bar_2)


def clamp_tax(dtau: float, value: float, bounds: TaxBounds) -> float:
    """
    税率 (または公約) value の変化率を [0, min(tau_bar_1, tau_bar_2)] の内側に射影する。
    """
    if dtau < -value:
        return -value
    upper = bounds.upper
    if dtau > upper - value:
        return upper - value
    return dtau


def directagg_tax_rate(x: SystemState, inc: Incomes, p: ModelParams,
                       bounds: Optional[TaxBounds] = None) -> float:
    """両グループの選好変化率を alpha で加重して税率の変化率とする"""
    bounds = bounds or tax_bounds(x, inc, p)
    rate1 = tax_preference_rate(x, inc, p, 0)
    rate2 = tax_preference_rate(x, inc, p, 1)
    return clamp_tax(p.alpha * rate1 + (1.0 - p.alpha) * rate2, x.tau, bounds)


# --- 選挙競争 (PolComp) ---

@lru_cache(maxsize=1)
def _warn_zero_income() -> None:
    logger.warning("総所得が0のため、影響力の重みを人口比にフォールバックします")


def influence_weights(x: SystemState, inc: Incomes, p: ModelParams) -> Tuple[float, float]:
    """J_g = alpha * 所得シェア + (1 - alpha) * 人口比"""
    N = p.N
    n_tilde = (p.groups[0].n / N, p.groups[1].n / N)
    if p.alpha == 0:
        return n_tilde
    y_pre = inc.y_pre
    group_income = (p.groups[0].n * y_pre[0], p.groups[1].n * y_pre[1])
    total = group_income[0] + group_income[1]
    if total <= 0:
        _warn_zero_income()
        return n_tilde
    return tuple(p.alpha * group_income[g] / total + (1.0 - p.alpha) * n_tilde[g] for g in range(2))


def aggregate_error(inc: Incomes, J: Tuple[float, float]) -> float:
    return J[0] * inc.e[0] + J[1] * inc.e[1]


def platform_drift(x: SystemState, inc: Incomes, p: ModelParams, q: int,
                   bounds: Optional[TaxBounds] = None, J: Optional[Tuple[float, float]] = None) -> float:
    """
    候補者 q (1 または 2) の公約の変化率。
    現行税率への引力と、有権者の誤差に応じたイデオロギー的な反発の和。
    """
    bounds = bounds or tax_bounds(x, inc, p)
    J = J or influence_weights(x, inc, p)
    platform = x.tau_check[q - 1]
    raw = p.sigma_A * (x.tau - platform) + p.sigma_R * p.candidate_biases[q - 1] * aggregate_error(inc, J)
    return clamp_tax(raw, platform, bounds)


def vote(x: SystemState, p: ModelParams, inc: Optional[Incomes] = None) -> ElectionOutcome:
    """各グループは選好に近い公約の候補者に投票する (等距離なら候補者1)"""
    inc = inc or compute_incomes(x, p)
    J = influence_weights(x, inc, p)
    ballots = tuple(
        1 if (x.tau_hat[g] - x.tau_check[0]) ** 2 <= (x.tau_hat[g] - x.tau_check[1]) ** 2 else 0
        for g in range(2)
    )
    V = ballots[0] * J[0] + ballots[1] * J[1]
    return ElectionOutcome(votes_for_1=V, winner=1 if V >= 0.5 else 2, ballots=ballots)


def hold_election(x: SystemState, p: ModelParams) -> int:
    outcome = vote(x, p)
    if outcome.winner != x.q_I:
        logger.debug(f"政権交代: 候補者{x.q_I} -> 候補者{outcome.winner} (得票 {outcome.votes_for_1:.3f})")
    return outcome.winner


def incumbent_pull(e_g: float, p: ModelParams, g: int) -> float:
    """M^I = exp(-omega * e_g / pi_bar_g)、pi_bar_g = phi_g R h はグループの最大所得"""
    pi_bar = p.groups[g].phi * p.R * p.h
    return math.exp(-p.omega * e_g / pi_bar)


def polcomp_voter_drift(x: SystemState, inc: Incomes, p: ModelParams, g: int) -> float:
    M = incumbent_pull(inc.e[g], p, g)
    incumbent = x.tau_check[x.q_I - 1]
    challenger = x.tau_check[2 - x.q_I]
    return M * (incumbent - x.tau_hat[g]) + (1.0 - M) * (challenger - x.tau_hat[g])


def political_derivative(x: SystemState, inc: Incomes, p: ModelParams):
    """
    政治サブシステムの微分 (dtau, dtau_hat, dpi_hat, dtau_check) を変種に応じて組み立てる。
    NoPolitics は税・選好・公約を固定し、DirectAgg は公約を固定する。
    """
    dpi_hat = (d_expected_consumption(x, inc, p, 0), d_expected_consumption(x, inc, p, 1))
    kind = p.variant.kind
    if kind == PoliticsKind.NO_POLITICS:
        return 0.0, (0.0, 0.0), dpi_hat, (0.0, 0.0)

    bounds = tax_bounds(x, inc, p)
    if kind == PoliticsKind.DIRECT_AGG:
        rates = (tax_preference_rate(x, inc, p, 0), tax_preference_rate(x, inc, p, 1))
        dtau_hat = (clamp_tax(rates[0], x.tau_hat[0], bounds), clamp_tax(rates[1], x.tau_hat[1], bounds))
        dtau = clamp_tax(p.alpha * rates[0] + (1.0 - p.alpha) * rates[1], x.tau, bounds)
        return dtau, dtau_hat, dpi_hat, (0.0, 0.0)

    J = influence_weights(x, inc, p)
    dtau = clamp_tax(x.tau_check[x.q_I - 1] - x.tau, x.tau, bounds)
    dtau_check = (platform_drift(x, inc, p, 1, bounds, J), platform_drift(x, inc, p, 2, bounds, J))
    # 有権者の選好は下限0のみで止める
    dtau_hat = tuple(max(polcomp_voter_drift(x, inc, p, g), -x.tau_hat[g]) for g in range(2))
    return dtau, dtau_hat, dpi_hat, dtau_check
