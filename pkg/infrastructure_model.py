import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from cachetools import LRUCache, cached

from model_params import MODEL_DEFAULTS, ModelParams

logger = logging.getLogger(__name__)

# 勾配の分母がこれより小さい場合は特異とみなす
SINGULAR_EPS = 1e-12


class SingularGradientError(ArithmeticError):
    """貯蓄・税の勾配の分母がほぼ0"""


class NonFiniteError(ArithmeticError):
    """所得計算に非有限値が現れた"""


# 積分器が使う状態ベクトルの並び (q_I はベクトルの外で保持する)
STATE_FIELDS = (
    "I_s", "I_p1", "I_p2", "l1", "l2", "s1", "s2", "tau",
    "tau_hat1", "tau_hat2", "pi_hat1", "pi_hat2", "tau_check1", "tau_check2",
)
STATE_SIZE = len(STATE_FIELDS)


@dataclass(frozen=True)
class SystemState:
    """
    連続状態 (インフラ容量、労働配分、貯蓄率、税率、選好、期待消費、公約) と現職候補者の番号。
    グループ別の値は (エリート, 非エリート) の順のタプル。q_I は 1 または 2。
    """
    I_s: float
    I_p: Tuple[float, float]
    l: Tuple[float, float]
    s: Tuple[float, float]
    tau: float
    tau_hat: Tuple[float, float]
    pi_hat: Tuple[float, float]
    tau_check: Tuple[float, float]
    q_I: int = 1

    def to_vector(self) -> np.ndarray:
        return np.array([
            self.I_s, self.I_p[0], self.I_p[1], self.l[0], self.l[1], self.s[0], self.s[1], self.tau,
            self.tau_hat[0], self.tau_hat[1], self.pi_hat[0], self.pi_hat[1],
            self.tau_check[0], self.tau_check[1],
        ], dtype=float)

    @classmethod
    def from_vector(cls, y: Sequence[float], q_I: int = 1) -> "SystemState":
        v = y.tolist() if isinstance(y, np.ndarray) else list(y)
        if len(v) != STATE_SIZE:
            raise ValueError(f"state vector must have {STATE_SIZE} entries, got {len(v)}")
        return cls(
            I_s=v[0], I_p=(v[1], v[2]), l=(v[3], v[4]), s=(v[5], v[6]), tau=v[7],
            tau_hat=(v[8], v[9]), pi_hat=(v[10], v[11]), tau_check=(v[12], v[13]), q_I=q_I,
        )

    def swapped(self) -> "SystemState":
        """グループのラベルを入れ替えた状態 (候補者の公約と現職はそのまま)"""
        return replace(
            self,
            I_p=self.I_p[::-1], l=self.l[::-1], s=self.s[::-1],
            tau_hat=self.tau_hat[::-1], pi_hat=self.pi_hat[::-1],
        )

    def violations(self, tol: float = 0.0) -> list:
        """不変条件に違反している項目名のリスト"""
        bad = []
        if self.I_s < -tol:
            bad.append("I_s")
        for g in range(2):
            if self.I_p[g] < -tol:
                bad.append(f"I_p{g + 1}")
            if not -tol <= self.l[g] <= 1 + tol:
                bad.append(f"l{g + 1}")
            if not -tol <= self.s[g] <= 1 + tol:
                bad.append(f"s{g + 1}")
            if self.tau_check[g] < -tol:
                bad.append(f"tau_check{g + 1}")
        if not -tol <= self.tau < 1:
            bad.append("tau")
        if self.q_I not in (1, 2):
            bad.append("q_I")
        return bad


@dataclass(frozen=True)
class Incomes:
    """状態から導かれる所得・消費 (グループ別の値は利用者1人あたり)"""
    y_s: Tuple[float, float]
    y_p: Tuple[float, float]
    y_post: Tuple[float, float]
    pi: Tuple[float, float]
    Y_s_total: float
    Y_p_total: float
    L_tilde: float
    e: Tuple[float, float]

    @property
    def y_pre(self) -> Tuple[float, float]:
        return (self.y_s[0] + self.y_p[0], self.y_s[1] + self.y_p[1])


class DerivedConstants(NamedTuple):
    h_p: float
    w_tilde: float
    phi_tilde: float
    tau_maintenance: float
    n_tilde: Tuple[float, float]
    N: float


def harvest_shared(I_s: float, p: ModelParams) -> float:
    """共有インフラの収穫率 H^s (I_0 以下で0、I_bar 以上で h の傾斜関数)"""
    if I_s >= p.I_bar:
        return p.h
    if I_s <= p.I_0:
        return 0.0
    return p.h * (I_s - p.I_0) / (p.I_bar - p.I_0)


def harvest_private(I_p_g: float, g: int, p: ModelParams, derived: Optional[DerivedConstants] = None) -> float:
    """
    グループ g の私的インフラの収穫率 H^p。
    閾値と上限は人口比 n_g/N で縮小し、上限の収穫率は h_p。
    """
    d = derived or derived_constants(p)
    share = d.n_tilde[g]
    if I_p_g >= share * p.I_bar:
        return d.h_p
    if I_p_g <= share * p.I_0:
        return 0.0
    return d.h_p * (I_p_g - share * p.I_0) / (share * (p.I_bar - p.I_0))


def _full_capacity_revenue_base(p: ModelParams, labor: Tuple[float, float], h_p: float) -> float:
    # 共有・私的インフラがともに上限にあるときの課税ベース
    shared = sum(grp.n * labor[g] * grp.phi * p.R * p.h for g, grp in enumerate(p.groups))
    private = sum(grp.n * (1.0 - labor[g]) * (grp.phi * p.R * h_p + p.w) for g, grp in enumerate(p.groups))
    return shared + p.psi * private


def maintenance_tax(p: ModelParams, labor: Tuple[float, float] = (1.0, 1.0)) -> float:
    """
    共有インフラを上限 I_bar に保つ税率 (delta * I_bar = mu * tau * 課税ベース)。
    labor=(0, 1) でエリート離脱時の維持税率になる。
    """
    if p.delta == 0:
        return 0.0
    d = derived_constants(p)
    base = _full_capacity_revenue_base(p, labor, d.h_p)
    if base <= 0:
        return math.inf
    return p.delta * p.I_bar / (p.mu * base)


@cached(cache=LRUCache(maxsize=256))
def derived_constants(p: ModelParams) -> DerivedConstants:
    """
    パラメータから導かれる定数 (h_p, w_tilde, phi_tilde, 維持税率)。
    ModelParams は不変なのでパラメータ単位でキャッシュする。
    """
    N = p.N
    n_tilde = (p.groups[0].n / N, p.groups[1].n / N)
    phi_tilde = sum(grp.n * grp.phi for grp in p.groups) / N
    w_tilde = p.w / (phi_tilde * p.R * p.h)
    if w_tilde >= 1.0:
        raise ValueError(f"w_tilde = {w_tilde:.6g} >= 1 leaves no private harvest rate (h_p <= 0)")
    h_p = p.h * (1.0 - w_tilde)
    if p.delta == 0:
        tau_maintenance = 0.0
    else:
        base = _full_capacity_revenue_base(p, (1.0, 1.0), h_p)
        tau_maintenance = p.delta * p.I_bar / (p.mu * base) if base > 0 else math.inf
    return DerivedConstants(h_p, w_tilde, phi_tilde, tau_maintenance, n_tilde, N)


def compute_incomes(x: SystemState, p: ModelParams, derived: Optional[DerivedConstants] = None) -> Incomes:
    """状態 x における所得・消費・誤差を計算する"""
    d = derived or derived_constants(p)
    values = (x.I_s, x.tau) + x.I_p + x.l + x.s + x.pi_hat
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteError(f"non-finite state: I_s={x.I_s}, I_p={x.I_p}, l={x.l}, s={x.s}, tau={x.tau}")

    H_s = harvest_shared(x.I_s, p)
    y_s = []
    y_p = []
    y_post = []
    pi = []
    e = []
    Y_s_total = 0.0
    Y_p_total = 0.0
    L_tilde = 0.0
    for g, grp in enumerate(p.groups):
        l_g = x.l[g]
        ys = l_g * grp.phi * p.R * H_s
        yp = (1.0 - l_g) * (grp.phi * p.R * harvest_private(x.I_p[g], g, p, d) + p.w)
        post = ys * (1.0 - x.tau) + yp * (1.0 - p.psi * x.tau)
        consumption = (1.0 - x.s[g]) * post
        y_s.append(ys)
        y_p.append(yp)
        y_post.append(post)
        pi.append(consumption)
        e.append(max(x.pi_hat[g] - consumption, 0.0))
        Y_s_total += grp.n * ys
        Y_p_total += grp.n * yp
        L_tilde += grp.phi * l_g * grp.n

    return Incomes(
        y_s=tuple(y_s), y_p=tuple(y_p), y_post=tuple(y_post), pi=tuple(pi),
        Y_s_total=Y_s_total, Y_p_total=Y_p_total, L_tilde=L_tilde, e=tuple(e),
    )


def initial_state(p: ModelParams,
                  l: Optional[Tuple[float, float]] = None,
                  I_p_frac: Optional[Tuple[float, float]] = None,
                  s: Optional[Tuple[float, float]] = None,
                  I_s: Optional[float] = None,
                  tau: Optional[float] = None,
                  incumbent: int = 1) -> SystemState:
    """
    初期状態を組み立てる。
    既定では I_s = I_bar, l = (0.9, 0.9), I_p1 = 0.5 * n_1/N * I_bar, s1 = 0.05, 税率は維持税率。
    選好と公約は税率に一致させ、期待消費は初期消費に一致させる (誤差0で開始)。
    """
    defaults = MODEL_DEFAULTS["initial"]
    d = derived_constants(p)
    l = tuple(l if l is not None else defaults["l"])
    I_p_frac = tuple(I_p_frac if I_p_frac is not None else defaults["I_p_frac"])
    s = tuple(s if s is not None else defaults["s"])
    I_s = p.I_bar if I_s is None else I_s
    tau = d.tau_maintenance if tau is None else tau
    if incumbent not in (1, 2):
        raise ValueError(f"incumbent must be 1 or 2, got {incumbent}")

    I_p = (I_p_frac[0] * d.n_tilde[0] * p.I_bar, I_p_frac[1] * d.n_tilde[1] * p.I_bar)
    x = SystemState(
        I_s=float(I_s), I_p=(float(I_p[0]), float(I_p[1])),
        l=(float(l[0]), float(l[1])), s=(float(s[0]), float(s[1])),
        tau=float(tau), tau_hat=(float(tau), float(tau)), pi_hat=(0.0, 0.0),
        tau_check=(float(tau), float(tau)), q_I=incumbent,
    )
    bad = x.violations()
    if bad:
        raise ValueError(f"initial state violates bounds: {', '.join(bad)}")
    inc = compute_incomes(x, p, d)
    return replace(x, pi_hat=inc.pi)
