"""
埋め込み型 Runge-Kutta 5(4) 法 (Tsitouras / Dormand-Prince) による時間積分。
選挙とショックは離散イベントとして正確な時刻に停止して適用する。
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, validator

from dynamics import Derivative, ModelSystem
from infrastructure_model import (
    STATE_FIELDS,
    STATE_SIZE,
    Incomes,
    NonFiniteError,
    SystemState,
    compute_incomes,
)
from model_params import MODEL_DEFAULTS, ModelParams, OpportunityShockMode, PoliticsKind
import politics

logger = logging.getLogger(__name__)

# 停止点 (出力時刻・イベント時刻) を同一とみなす許容幅
STOP_TOL = 1e-9
DT_MIN = 1e-10


class IntegrationError(RuntimeError):
    """刻み幅のアンダーフロー、非有限な状態、解消できない境界違反、ステップ数超過"""


class Tableau(NamedTuple):
    c: np.ndarray
    A: np.ndarray  # 7x7 下三角 (最終行 = b で FSAL)
    b: np.ndarray
    E: np.ndarray  # 誤差推定の重み (b - b_hat)


def _tableau(c, rows, b, E) -> Tableau:
    A = np.zeros((7, 7))
    for i, row in enumerate(rows, start=1):
        A[i, :len(row)] = row
    A[6, :6] = b[:6]
    return Tableau(np.array(c, dtype=float), A, np.array(b, dtype=float), np.array(E, dtype=float))


TSIT5 = _tableau(
    c=[0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0],
    rows=[
        [0.161],
        [-0.008480655492356989, 0.335480655492357],
        [2.897153057105493, -6.359448489975075, 4.3622954328695815],
        [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525],
        [5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401, -0.028269050394068383],
    ],
    b=[0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
       -3.290069515436081, 2.324710524099774, 0.0],
    E=[-0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995, -0.1447110071732629,
       0.5823571654525552, -0.45808210592918697, 0.015151515151515152],
)

DOPRI5 = _tableau(
    c=[0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
    rows=[
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    ],
    b=[35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0],
    E=[-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40],
)

TABLEAUS: Dict[str, Tableau] = {"tsit5": TSIT5, "dopri5": DOPRI5}

# 状態の上下限 (l, s は [0, 1]、tau は 1 未満、その他は非負)
_LOWER = np.zeros(STATE_SIZE)
_UPPER = np.full(STATE_SIZE, np.inf)
_UPPER[3:8] = 1.0
_L1 = STATE_FIELDS.index("l1")


class SolverControls(BaseModel):
    method: str = MODEL_DEFAULTS["solver"]["method"]
    rtol: float = MODEL_DEFAULTS["solver"]["rtol"]
    atol: float = MODEL_DEFAULTS["solver"]["atol"]
    dt_init: float = MODEL_DEFAULTS["solver"]["dt_init"]
    dt_max: float = MODEL_DEFAULTS["solver"]["dt_max"]
    output_dt: float = MODEL_DEFAULTS["solver"]["output_dt"]
    horizon: float = MODEL_DEFAULTS["solver"]["horizon"]
    adaptive: bool = MODEL_DEFAULTS["solver"]["adaptive"]
    max_steps: int = MODEL_DEFAULTS["solver"]["max_steps"]

    class Config:
        frozen = True

    @validator("method")
    def _known_method(cls, v):
        if v not in TABLEAUS:
            raise ValueError(f"method must be one of {', '.join(TABLEAUS)}")
        return v

    @validator("rtol", "atol", "dt_init", "dt_max", "output_dt", "horizon", "max_steps")
    def _positive(cls, v, field):
        if not v > 0:
            raise ValueError(f"{field.name} must be > 0")
        return v


# --- イベント ---

class EventKind(str, Enum):
    CAPACITY_SHOCK = "CapacityShock"
    OPPORTUNITY_SHOCK = "OpportunityShock"
    ELECTION = "Election"


# 同時刻のイベントはこの順に適用する
_EVENT_ORDER = {EventKind.CAPACITY_SHOCK: 0, EventKind.OPPORTUNITY_SHOCK: 1, EventKind.ELECTION: 2}


@dataclass(frozen=True)
class Event:
    time: float
    kind: EventKind
    magnitude: float = 0.0


class EventSchedule:
    """(0, horizon] 内のイベントを時刻順に保持する"""

    def __init__(self, events: Iterable[Event], horizon: float):
        if not horizon > 0:
            raise ValueError("horizon must be > 0")
        self.horizon = float(horizon)
        ordered = sorted(events, key=lambda ev: (ev.time, _EVENT_ORDER[ev.kind]))
        for ev in ordered:
            if not 0 < ev.time <= self.horizon + STOP_TOL:
                raise ValueError(f"event time {ev.time} outside (0, {self.horizon}]")
        self.events: Tuple[Event, ...] = tuple(ordered)

    @classmethod
    def build(cls, horizon: float, election_period: Optional[float] = None,
              shocks: Sequence[Tuple[float, float]] = ()) -> "EventSchedule":
        """election_period ごとの選挙と (時刻, 規模) の容量ショックからスケジュールを作る"""
        events = [Event(float(t), EventKind.CAPACITY_SHOCK, float(m)) for t, m in shocks]
        if election_period is not None:
            k = 1
            while k * election_period <= horizon + STOP_TOL:
                events.append(Event(k * election_period, EventKind.ELECTION))
                k += 1
        return cls(events, horizon)

    def grouped(self) -> List[Tuple[float, List[Event]]]:
        groups: List[Tuple[float, List[Event]]] = []
        for ev in self.events:
            if groups and abs(ev.time - groups[-1][0]) <= STOP_TOL:
                groups[-1][1].append(ev)
            else:
                groups.append((ev.time, [ev]))
        return groups

    def count(self, kind: EventKind) -> int:
        return sum(1 for ev in self.events if ev.kind == kind)

    def __len__(self) -> int:
        return len(self.events)


def apply_event(x: SystemState, p: ModelParams, event: Event) -> Tuple[SystemState, ModelParams]:
    """イベントを適用した状態とパラメータを返す"""
    if event.kind == EventKind.ELECTION:
        if p.variant.kind != PoliticsKind.POL_COMP:
            raise ValueError(f"elections are only defined for PolComp, got {p.variant.label}")
        return replace(x, q_I=politics.hold_election(x, p)), p

    if event.kind == EventKind.CAPACITY_SHOCK:
        m = event.magnitude
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"capacity shock magnitude must be in [0, 1], got {m}")
        return replace(x, I_s=(1.0 - m) * x.I_s), p

    d = event.magnitude
    if d == 0:
        return x, p
    if p.opportunity_shock_mode == OpportunityShockMode.ADDITIVE:
        mu_p1 = p.groups[0].mu_p + d * p.mu
    else:
        mu_p1 = d * p.mu
    if mu_p1 < 0:
        raise ValueError(f"opportunity shock {d} makes mu_p1 negative")
    return x, p.with_group(0, mu_p=mu_p1)


def enforce_labor_cap(x: SystemState, cap: float = 0.9) -> SystemState:
    if x.l[0] <= cap:
        return x
    return replace(x, l=(cap, x.l[1]))


def project_labor_cap(deriv: Derivative, x: SystemState, cap: float = 0.9) -> Derivative:
    """上限に達したエリートの労働配分が外向きに動かないよう微分を0にする"""
    if x.l[0] >= cap and deriv.dl[0] > 0:
        return replace(deriv, dl=(0.0, deriv.dl[1]))
    return deriv


# --- 軌道 ---

@dataclass
class EventRecord:
    time: float
    kind: str
    detail: str


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    incumbents: np.ndarray
    params: ModelParams
    events: List[EventRecord] = field(default_factory=list)
    failed: bool = False
    failure_reason: Optional[str] = None

    @property
    def terminal_time(self) -> float:
        return float(self.times[-1])

    def state(self, i: int) -> SystemState:
        return SystemState.from_vector(self.states[i], int(self.incumbents[i]))

    @property
    def terminal_state(self) -> SystemState:
        return self.state(len(self.times) - 1)

    def column(self, name: str) -> np.ndarray:
        return self.states[:, STATE_FIELDS.index(name)]

    def incomes(self, i: int) -> Incomes:
        return compute_incomes(self.state(i), self.params)

    def tail_indices(self, window: float) -> np.ndarray:
        """終端から window 時間以内のサンプル番号"""
        start = self.terminal_time - window
        return np.nonzero(self.times >= start - STOP_TOL)[0]


class RungeKuttaIntegrator:
    """
    FSAL の埋め込み型 RK 5(4) 法。出力時刻とイベント時刻は停止点で、ステップはそれをまたがない。
    """

    def __init__(self, p: ModelParams, ctrl: SolverControls, labor_cap: Optional[float] = None):
        self.ctrl = ctrl
        self.tableau = TABLEAUS[ctrl.method]
        self.labor_cap = labor_cap
        self._set_params(p)

    def _set_params(self, p: ModelParams):
        self.p = p
        self.system = ModelSystem(p)

    def rhs(self, y: np.ndarray, q: int) -> np.ndarray:
        x = SystemState.from_vector(y, q)
        deriv = self.system.derivative(x)
        if self.labor_cap is not None:
            deriv = project_labor_cap(deriv, x, self.labor_cap)
        return deriv.to_vector()

    def step(self, y: np.ndarray, q: int, h: float, k1: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """1ステップ進めて (y_new, f(y_new), 誤差ベクトル) を返す"""
        tab = self.tableau
        K = np.empty((7, y.shape[0]))
        K[0] = k1
        for i in range(1, 7):
            K[i] = self.rhs(y + h * (tab.A[i, :i] @ K[:i]), q)
        y_new = y + h * (tab.A[6, :6] @ K[:6])
        return y_new, K[6], h * (tab.E @ K)

    def _error_norm(self, y: np.ndarray, y_new: np.ndarray, err_vec: np.ndarray) -> float:
        scale = self.ctrl.atol + self.ctrl.rtol * np.maximum(np.abs(y), np.abs(y_new))
        return float(np.sqrt(np.mean((err_vec / scale) ** 2)))

    def _guard(self, y_new: np.ndarray) -> Tuple[np.ndarray, bool, bool]:
        """
        境界違反を検査する。atol 以内なら境界に戻し、それを超える違反は (ok=False) を返す。
        labor_cap があれば、ステップで上限を越えた l1 も上限に戻す。
        戻り値は (状態, ok, clipped)。
        """
        violation = max(float(np.max(_LOWER - y_new)), float(np.max(y_new - _UPPER)))
        if violation > self.ctrl.atol:
            return y_new, False, False
        clipped = violation > 0
        if clipped:
            y_new = np.clip(y_new, _LOWER, _UPPER)
        if self.labor_cap is not None and y_new[_L1] > self.labor_cap:
            y_new = y_new.copy()
            y_new[_L1] = self.labor_cap
            clipped = True
        return y_new, True, clipped

    def _output_grid(self, horizon: float) -> List[float]:
        dt = self.ctrl.output_dt
        n_out = int(math.floor(horizon / dt + 1e-9))
        grid = [k * dt for k in range(1, n_out + 1)]
        if not grid or horizon - grid[-1] > STOP_TOL:
            grid.append(horizon)
        else:
            grid[-1] = horizon
        return grid

    def _apply_events(self, t: float, y: np.ndarray, q: int, events: List[Event],
                      log: List[EventRecord]) -> Tuple[np.ndarray, int]:
        x = SystemState.from_vector(y, q)
        for ev in events:
            before = x
            x, p_new = apply_event(x, self.p, ev)
            if ev.kind == EventKind.ELECTION:
                detail = f"incumbent {before.q_I} -> {x.q_I}"
            elif ev.kind == EventKind.CAPACITY_SHOCK:
                detail = f"magnitude {ev.magnitude:.6g}: I_s {before.I_s:.6g} -> {x.I_s:.6g}"
            else:
                detail = f"delta {ev.magnitude:.6g}: mu_p1 {self.p.groups[0].mu_p:.6g} -> {p_new.groups[0].mu_p:.6g}"
            if p_new is not self.p:
                self._set_params(p_new)
            log.append(EventRecord(t, ev.kind.value, detail))
        if self.labor_cap is not None:
            x = enforce_labor_cap(x, self.labor_cap)
        return x.to_vector(), x.q_I

    def run(self, x0: SystemState, sched: EventSchedule) -> Trajectory:
        ctrl = self.ctrl
        y = x0.to_vector()
        q = x0.q_I
        t = 0.0
        times = [t]
        states = [y.copy()]
        incumbents = [q]
        log: List[EventRecord] = []
        grid = self._output_grid(sched.horizon)
        groups = sched.grouped()
        failure = None

        try:
            if not np.all(np.isfinite(y)):
                raise IntegrationError("non-finite initial state")
            h = ctrl.dt_init
            k1 = self.rhs(y, q)
            out_i = 0
            ev_i = 0
            steps = 0
            while out_i < len(grid):
                t_out = grid[out_i]
                t_ev = groups[ev_i][0] if ev_i < len(groups) else math.inf
                t_stop = min(t_out, t_ev)

                if t_stop - t > STOP_TOL:
                    h_try = min(h, ctrl.dt_max, t_stop - t)
                    landing = t + h_try >= t_stop - STOP_TOL
                    if landing:
                        h_try = t_stop - t
                    steps += 1
                    if steps > ctrl.max_steps:
                        raise IntegrationError(f"step budget of {ctrl.max_steps} exhausted at t={t:.6g}")

                    y_new, k_new, err_vec = self.step(y, q, h_try, k1)
                    if not np.all(np.isfinite(y_new)):
                        if not ctrl.adaptive:
                            raise IntegrationError(f"non-finite state at t={t + h_try:.6g}")
                        h = self._shrink(h_try, 0.2, t)
                        continue

                    factor = 1.0
                    if ctrl.adaptive:
                        err = self._error_norm(y, y_new, err_vec)
                        if err > 1.0:
                            h = self._shrink(h_try, max(0.2, 0.9 * err ** -0.2), t)
                            continue
                        factor = min(5.0, max(0.2, 0.9 * max(err, 1e-10) ** -0.2))

                    y_new, ok, clipped = self._guard(y_new)
                    if not ok:
                        if not ctrl.adaptive:
                            raise IntegrationError(f"bound violation beyond atol at t={t + h_try:.6g}")
                        h = self._shrink(h_try, 0.5, t)
                        continue
                    if clipped:
                        k_new = self.rhs(y_new, q)

                    t = t_stop if landing else t + h_try
                    y = y_new
                    k1 = k_new
                    if ctrl.adaptive:
                        proposal = h_try * factor
                        if landing and h_try < h:
                            proposal = max(proposal, h)
                        h = min(ctrl.dt_max, proposal)
                    continue

                t = t_stop
                if abs(t_ev - t) <= STOP_TOL:
                    y, q = self._apply_events(t, y, q, groups[ev_i][1], log)
                    k1 = self.rhs(y, q)
                    ev_i += 1
                if abs(t_out - t) <= STOP_TOL:
                    times.append(t)
                    states.append(y.copy())
                    incumbents.append(q)
                    out_i += 1
        except (IntegrationError, NonFiniteError) as e:
            failure = str(e)
            logger.warning(f"積分に失敗しました (t={t:.6g}): {failure}")

        return Trajectory(
            times=np.array(times), states=np.array(states), incumbents=np.array(incumbents, dtype=int),
            params=self.p, events=log, failed=failure is not None, failure_reason=failure,
        )

    def _shrink(self, h: float, factor: float, t: float) -> float:
        h_new = h * factor
        if h_new < DT_MIN:
            raise IntegrationError(f"step size underflow (dt={h_new:.3e}) at t={t:.6g}")
        return h_new


def integrate(x0: SystemState, p: ModelParams, sched: EventSchedule,
              ctrl: Optional[SolverControls] = None, labor_cap: Optional[float] = None) -> Trajectory:
    """
    x0 から sched.horizon まで積分する。数値的に失敗した場合は failed=True の軌道を返す。
    labor_cap を与えるとエリートの労働配分を上限で止める (確率的ショック実験用)。
    """
    ctrl = ctrl or SolverControls()
    return RungeKuttaIntegrator(p, ctrl, labor_cap).run(x0, sched)
