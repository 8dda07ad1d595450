"""
ショック実験: ショック系列の生成、均衡の分類、頑健性・厚生の集計、決定論的/確率的スイープ。
"""
import hashlib
import json
import logging
import multiprocessing as mp
from collections import Counter
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, validator
from scipy import stats

from infrastructure_model import compute_incomes, derived_constants, initial_state
from integrator import (
    Event,
    EventKind,
    EventSchedule,
    SolverControls,
    Trajectory,
    apply_event,
    enforce_labor_cap,
    integrate,
)
from model_params import MODEL_DEFAULTS, ModelParams, PoliticalVariant, PoliticsKind

logger = logging.getLogger(__name__)

# 分類と厚生を平均する末尾区間の長さ (典型的な遷移時間)
TAIL_WINDOW = 40.0
# 共有インフラが「残った」とみなす閾値 (I_bar に対する比)
PERSISTENCE_FRACTION = 1e-3
DEFAULT_LABOR_CAP = 0.9


class Classification(str, Enum):
    FULL_SHARED = "FullShared"
    COLLAPSE = "Collapse"
    ELITES_ABANDON = "ElitesAbandon"
    DISTINCT_SOCIETIES = "DistinctSocieties"
    UNCLASSIFIED = "Unclassified"


class MagnitudeDistribution(str, Enum):
    TRUNCEXP = "truncexp"
    FIXED = "fixed"


class ShockRegime(BaseModel):
    """平均間隔 T_s、平均規模 a のポアソン型ショック"""
    T_s: float
    a: float
    horizon: float = MODEL_DEFAULTS["solver"]["horizon"]
    seed: int = 0

    class Config:
        frozen = True

    @validator("T_s", "horizon")
    def _positive(cls, v, field):
        if not v > 0:
            raise ValueError(f"{field.name} must be > 0")
        return v

    @validator("a")
    def _fraction(cls, v):
        if not 0 < v <= 1:
            raise ValueError("a must satisfy 0 < a <= 1")
        return v

    @property
    def label(self) -> str:
        return f"Ts{self.T_s:g}_a{self.a:g}"


class InitialConditions(BaseModel):
    """初期状態の設定。incumbent は TR (増税反発の候補者), TF (増税寄りの候補者), random"""
    l: Tuple[float, float] = tuple(MODEL_DEFAULTS["initial"]["l"])
    I_p_frac: Tuple[float, float] = tuple(MODEL_DEFAULTS["initial"]["I_p_frac"])
    s: Tuple[float, float] = tuple(MODEL_DEFAULTS["initial"]["s"])
    I_s: Optional[float] = None
    tau: Optional[float] = None
    incumbent: str = MODEL_DEFAULTS["initial"]["incumbent"]

    class Config:
        frozen = True

    @validator("incumbent")
    def _incumbent_label(cls, v):
        if v not in ("TR", "TF", "random"):
            raise ValueError("incumbent must be TR, TF or random")
        return v


def resolve_incumbent(label: str, p: ModelParams, rng: Optional[np.random.Generator] = None) -> int:
    """TR / TF / random を候補者番号 (1 or 2) に解決する"""
    if label == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return int(rng.integers(1, 3))
    bias = -1 if label == "TR" else 1
    if bias not in p.candidate_biases:
        raise ValueError(f"no candidate with bias {bias:+d} for incumbent {label}")
    return p.candidate_biases.index(bias) + 1


def incumbent_label(q: int, p: ModelParams) -> str:
    return "TR" if p.candidate_biases[q - 1] < 0 else "TF"


def derive_seed(base_seed: int, run_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, run_index]).generate_state(1)[0])


# --- ショック系列 ---

def sample_shock_series(regime: ShockRegime, rng: Optional[np.random.Generator] = None,
                        magnitude: str = MagnitudeDistribution.TRUNCEXP.value) -> List[Tuple[float, float]]:
    """
    到着間隔は平均 T_s の指数分布、規模は平均 a の指数分布を (0, 1] に切断したもの。
    rng を省略すると regime.seed から生成する。
    """
    rng = rng if rng is not None else np.random.default_rng(regime.seed)
    times = []
    t = rng.exponential(regime.T_s)
    while t <= regime.horizon:
        times.append(float(t))
        t += rng.exponential(regime.T_s)
    if not times:
        return []
    if MagnitudeDistribution(magnitude) == MagnitudeDistribution.FIXED:
        sizes = [regime.a] * len(times)
    else:
        sizes = stats.truncexpon.rvs(b=1.0 / regime.a, scale=regime.a, size=len(times), random_state=rng)
        sizes = [float(min(max(m, np.nextafter(0.0, 1.0)), 1.0)) for m in sizes]
    return list(zip(times, sizes))


def build_schedule(p: ModelParams, horizon: float,
                   shocks: Sequence[Tuple[float, float]] = ()) -> EventSchedule:
    """PolComp なら T_e ごとの選挙、それに容量ショックを加えたスケジュール"""
    election_period = p.T_e if p.variant.kind == PoliticsKind.POL_COMP else None
    return EventSchedule.build(horizon, election_period, [s for s in shocks if 0 < s[0] <= horizon])


# --- 分類と指標 ---

def _tail_means(traj: Trajectory, window: float) -> Dict[str, float]:
    idx = traj.tail_indices(window)
    return {name: float(np.mean(traj.column(name)[idx])) for name in ("I_s", "I_p1", "l1", "l2")}


def classify_equilibrium(traj: Trajectory, p: Optional[ModelParams] = None,
                         window: float = TAIL_WINDOW) -> Classification:
    """末尾区間の平均値から4つの事後均衡のどれかを判定する"""
    p = p or traj.params
    share1 = derived_constants(p).n_tilde[0]
    eps = PERSISTENCE_FRACTION * p.I_bar
    m = _tail_means(traj, window)
    private_full = m["I_p1"] > 0.9 * share1 * p.I_bar

    if m["I_s"] < eps and m["I_p1"] < eps:
        return Classification.COLLAPSE
    if m["I_s"] < eps and private_full:
        return Classification.ELITES_ABANDON
    if m["I_s"] > 0.5 * p.I_bar and private_full and m["l1"] < 0.1:
        return Classification.DISTINCT_SOCIETIES
    if m["I_s"] > 0.5 * p.I_bar and m["I_p1"] < eps and m["l2"] > 0.9:
        return Classification.FULL_SHARED
    logger.info(f"分類できない終状態: I_s={m['I_s']:.4g}, I_p1={m['I_p1']:.4g}, l={m['l1']:.3f}/{m['l2']:.3f}")
    return Classification.UNCLASSIFIED


class WelfareStats(NamedTuple):
    per_capita_welfare: float
    gini: float


def two_group_gini(pi: Tuple[float, float], n: Tuple[float, float]) -> float:
    N = n[0] + n[1]
    mean = (n[0] * pi[0] + n[1] * pi[1]) / N
    if mean <= 0:
        logger.debug("平均消費が0のため Gini を0とします")
        return 0.0
    return n[0] * n[1] * abs(pi[0] - pi[1]) / (N * N * mean)


def welfare_stats(traj: Trajectory, p: Optional[ModelParams] = None, window: float = TAIL_WINDOW) -> WelfareStats:
    """末尾区間の1人あたり厚生と、2グループ間の消費の Gini 係数"""
    p = p or traj.params
    n = (p.groups[0].n, p.groups[1].n)
    N = n[0] + n[1]
    pis = np.array([compute_incomes(traj.state(i), p).pi for i in traj.tail_indices(window)])
    mean_pi = pis.mean(axis=0)
    welfare = float((n[0] * mean_pi[0] + n[1] * mean_pi[1]) / N)
    return WelfareStats(welfare, two_group_gini((float(mean_pi[0]), float(mean_pi[1])), n))


def tau_oscillations(traj: Trajectory, window: Optional[float] = TAIL_WINDOW, tol: float = 1e-9) -> int:
    """税率の増減が反転した回数 (リミットサイクルの目安)。window=None で全区間"""
    tau = traj.column("tau")
    if window is not None:
        tau = tau[traj.tail_indices(window)]
    diffs = np.diff(tau)
    signs = np.sign(diffs[np.abs(diffs) > tol])
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


def params_hash(p: ModelParams) -> str:
    text = json.dumps(json.loads(p.json()), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# --- 1 run ---

@dataclass(frozen=True)
class RunDescriptor:
    run_id: int
    params: ModelParams
    initial: InitialConditions
    ctrl: SolverControls
    seed: int
    d_Is: float = 0.0
    d_mu: float = 0.0
    regime: Optional[ShockRegime] = None
    labor_cap: Optional[float] = None
    magnitude: str = MagnitudeDistribution.TRUNCEXP.value


@dataclass
class RunRecord:
    run_id: int
    variant: str
    psi: int
    alpha: float
    T_e: float
    sigma_R: float
    d_Is: float
    d_mu: float
    T_s: Optional[float]
    a: Optional[float]
    f_s: float
    labor_cap: Optional[float]
    seed: int
    incumbent0: int
    incumbent_label: str
    Is_final: float
    classification: str
    persisted: bool
    welfare: float
    gini: float
    failed: bool
    failure_reason: str = ""
    config_hash: str = ""

    @property
    def influence_side(self) -> str:
        """影響力ルールの側 (equal: Equal/MedianVoter, income: IncomeBased/EliteCapture)"""
        parts = self.variant.split("-")
        if len(parts) < 2:
            return ""
        return {"Eq": "equal", "MV": "equal", "Inc": "income", "EC": "income"}.get(parts[1], "")

    @property
    def variant_family(self) -> str:
        """影響力ルールを除いた変種名"""
        parts = self.variant.split("-")
        return "-".join([parts[0]] + parts[2:])

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def prepare_run(desc: RunDescriptor) -> Tuple[Any, ModelParams, EventSchedule, int]:
    """
    初期状態・パラメータ・スケジュールを組み立てる。
    期待消費は無ショックの初期状態で合わせ、決定論的ショックはその後 t=0+ に適用する。
    """
    p = desc.params
    rng = np.random.default_rng(desc.seed)
    incumbent = resolve_incumbent(desc.initial.incumbent, p, rng)
    init = desc.initial
    x0 = initial_state(p, l=init.l, I_p_frac=init.I_p_frac, s=init.s, I_s=init.I_s, tau=init.tau,
                       incumbent=incumbent)
    if desc.d_Is:
        x0, p = apply_event(x0, p, Event(0.0, EventKind.CAPACITY_SHOCK, desc.d_Is))
    if desc.d_mu:
        x0, p = apply_event(x0, p, Event(0.0, EventKind.OPPORTUNITY_SHOCK, desc.d_mu))
    if desc.labor_cap is not None and x0.l[0] > desc.labor_cap:
        x0 = enforce_labor_cap(x0, desc.labor_cap)
    shocks = []
    if desc.regime is not None:
        shocks = sample_shock_series(desc.regime, rng, desc.magnitude)
    return x0, p, build_schedule(p, desc.ctrl.horizon, shocks), incumbent


def execute_run(desc: RunDescriptor) -> RunRecord:
    """1 run を実行して集計行を返す (ワーカープロセスから呼ばれる)"""
    x0, p, sched, incumbent = prepare_run(desc)
    traj = integrate(x0, p, sched, desc.ctrl, desc.labor_cap)
    return summarize_run(desc, traj, incumbent)


def summarize_run(desc: RunDescriptor, traj: Trajectory, incumbent: int) -> RunRecord:
    p = traj.params
    Is_final = float(traj.terminal_state.I_s)
    classification = classify_equilibrium(traj, p)
    persisted = (not traj.failed) and Is_final > PERSISTENCE_FRACTION * p.I_bar
    if persisted and classification in (Classification.COLLAPSE, Classification.ELITES_ABANDON):
        logger.info(f"run {desc.run_id}: 終端で I_s が回復しているため Unclassified とします")
        classification = Classification.UNCLASSIFIED
    welfare, gini = welfare_stats(traj, p)
    base = desc.params
    return RunRecord(
        run_id=desc.run_id, variant=base.variant.label, psi=base.psi, alpha=base.alpha,
        T_e=base.T_e, sigma_R=base.sigma_R, d_Is=desc.d_Is, d_mu=desc.d_mu,
        T_s=desc.regime.T_s if desc.regime else None, a=desc.regime.a if desc.regime else None,
        f_s=base.f_s, labor_cap=desc.labor_cap, seed=desc.seed,
        incumbent0=incumbent, incumbent_label=incumbent_label(incumbent, base),
        Is_final=Is_final, classification=classification.value, persisted=persisted,
        welfare=welfare, gini=gini, failed=traj.failed, failure_reason=traj.failure_reason or "",
        config_hash=params_hash(base),
    )


def run_descriptors(descs: Sequence[RunDescriptor], workers: int = 1) -> List[RunRecord]:
    """
    run をワーカーに配り、run_id 順に結果を返す。workers=1 ならプロセス内で実行する。
    """
    total = len(descs)
    step = max(1, total // 10)
    records: List[RunRecord] = []

    def _progress(i: int, rec: RunRecord):
        if rec.failed:
            logger.warning(f"run {rec.run_id} failed: {rec.failure_reason}")
        if (i + 1) % step == 0 or i + 1 == total:
            logger.info(f"進捗: {i + 1}/{total} runs")

    if workers <= 1 or total <= 1:
        for i, desc in enumerate(descs):
            rec = execute_run(desc)
            _progress(i, rec)
            records.append(rec)
        return records

    chunksize = max(1, total // (workers * 8))
    with mp.Pool(processes=workers) as pool:
        for i, rec in enumerate(pool.imap(execute_run, descs, chunksize=chunksize)):
            _progress(i, rec)
            records.append(rec)
    return records


# --- スイープ ---

class SweepGrid(BaseModel):
    d_Is: List[float] = [float(v) for v in np.linspace(0.0, 1.0, 21)]
    d_mu: List[float] = [float(v) for v in np.linspace(0.0, 2.0, 21)]
    # variants, T_e, sigma_R, psi, f_s は空ならモデル側の値 (model.*) だけを使う
    T_e: List[float] = []
    sigma_R: List[float] = []
    variants: List[str] = []
    incumbents: List[str] = ["TR", "TF"]
    psi: List[int] = []
    f_s: List[float] = []

    class Config:
        frozen = True

    @validator("variants", each_item=True)
    def _known_variant(cls, v):
        PoliticalVariant.from_label(v)
        return v

    @validator("incumbents", each_item=True)
    def _incumbent_label(cls, v):
        if v not in ("TR", "TF", "random"):
            raise ValueError("incumbents must be TR, TF or random")
        return v


@dataclass
class SweepResult:
    kind: str
    records: List[RunRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.records if r.failed)

    def class_counts(self) -> Dict[str, int]:
        counts = Counter(r.classification for r in self.records)
        return {c.value: counts.get(c.value, 0) for c in Classification}


def cell_params(base: ModelParams, variant: str, psi: int, f_s: float,
                T_e: float, sigma_R: float) -> ModelParams:
    return base.with_updates(variant=variant, psi=psi, f_s=f_s, T_e=T_e, sigma_R=sigma_R)


def _political_axes(variant: str, T_e: List[float], sigma_R: List[float],
                    incumbents: List[str]) -> Tuple[List[float], List[float], List[str]]:
    # 選挙のない変種では T_e, sigma_R, 現職は結果に影響しないので先頭の値だけ使う
    if PoliticalVariant.from_label(variant).kind == PoliticsKind.POL_COMP:
        return T_e, sigma_R, incumbents
    return T_e[:1], sigma_R[:1], incumbents[:1]


def deterministic_descriptors(base: ModelParams, grid: SweepGrid,
                              initial: Optional[InitialConditions] = None,
                              ctrl: Optional[SolverControls] = None,
                              base_seed: int = 0) -> List[RunDescriptor]:
    initial = initial or InitialConditions()
    ctrl = ctrl or SolverControls()
    descs: List[RunDescriptor] = []
    for variant in grid.variants or [base.variant.label]:
        T_es, sigmas, incumbents = _political_axes(variant, grid.T_e or [base.T_e], grid.sigma_R or [base.sigma_R],
                                                    grid.incumbents)
        for psi in grid.psi or [base.psi]:
            for f_s in grid.f_s or [base.f_s]:
                for T_e in T_es:
                    for sigma_R in sigmas:
                        p = cell_params(base, variant, psi, f_s, T_e, sigma_R)
                        for inc_label in incumbents:
                            init = initial.copy(update={"incumbent": inc_label})
                            for d_Is in grid.d_Is:
                                for d_mu in grid.d_mu:
                                    run_id = len(descs)
                                    descs.append(RunDescriptor(
                                        run_id=run_id, params=p, initial=init, ctrl=ctrl,
                                        seed=derive_seed(base_seed, run_id), d_Is=d_Is, d_mu=d_mu,
                                    ))
    return descs


def run_deterministic_sweep(base: ModelParams, grid: SweepGrid,
                            initial: Optional[InitialConditions] = None,
                            ctrl: Optional[SolverControls] = None,
                            base_seed: int = 0, workers: int = 1) -> SweepResult:
    """
    グリッドの各セルで1回ずつ、t=0+ に容量ショックと機会ショックを与えて積分する。
    """
    descs = deterministic_descriptors(base, grid, initial, ctrl, base_seed)
    logger.info(f"決定論的スイープ: {len(descs)} runs")
    result = SweepResult("deterministic", run_descriptors(descs, workers))
    _warn_unclassified(result)
    return result


def stochastic_descriptors(base: ModelParams, regimes: Sequence[ShockRegime], n_series: int,
                           T_e: Sequence[float], sigma_R: Sequence[float],
                           variants: Optional[Sequence[str]] = None,
                           psi: Optional[Sequence[int]] = None,
                           f_s: Optional[Sequence[float]] = None,
                           labor_caps: Sequence[Optional[float]] = (DEFAULT_LABOR_CAP,),
                           initial: Optional[InitialConditions] = None,
                           ctrl: Optional[SolverControls] = None,
                           base_seed: int = 0,
                           magnitude: str = MagnitudeDistribution.TRUNCEXP.value) -> List[RunDescriptor]:
    if n_series < 1:
        raise ValueError("n_series must be >= 1")
    initial = (initial or InitialConditions()).copy(update={"incumbent": "random"})
    ctrl = ctrl or SolverControls()
    T_e = list(T_e) or [base.T_e]
    sigma_R = list(sigma_R) or [base.sigma_R]
    variants = list(variants) if variants else [base.variant.label]
    psi = list(psi) if psi else [base.psi]
    f_s = list(f_s) if f_s else [base.f_s]
    descs: List[RunDescriptor] = []
    for regime in regimes:
        regime = regime.copy(update={"horizon": ctrl.horizon})
        for variant in variants:
            for psi_v in psi:
                for f_s_v in f_s:
                    for cap in labor_caps:
                        for T_e_v in T_e:
                            for sigma_v in sigma_R:
                                p = cell_params(base, variant, psi_v, f_s_v, T_e_v, sigma_v)
                                for _ in range(n_series):
                                    run_id = len(descs)
                                    descs.append(RunDescriptor(
                                        run_id=run_id, params=p, initial=initial, ctrl=ctrl,
                                        seed=derive_seed(base_seed, run_id), regime=regime,
                                        labor_cap=cap, magnitude=magnitude,
                                    ))
    return descs


def run_stochastic_sweep(base: ModelParams, regimes: Sequence[ShockRegime], n_series: int,
                         T_e: Sequence[float], sigma_R: Sequence[float],
                         workers: int = 1, **kwargs: Any) -> SweepResult:
    """
    各 (ショック体制, T_e, sigma_R) で n_series 本のショック系列を流す。
    初期の現職は run ごとに無作為に選び、エリートの労働配分には上限を課す。
    """
    descs = stochastic_descriptors(base, regimes, n_series, T_e, sigma_R, **kwargs)
    logger.info(f"確率的スイープ: {len(descs)} runs ({len(regimes)} regimes x {n_series} series)")
    result = SweepResult("stochastic", run_descriptors(descs, workers))
    _warn_unclassified(result)
    return result


def _warn_unclassified(result: SweepResult):
    if not result.records:
        return
    rate = result.class_counts()[Classification.UNCLASSIFIED.value] / len(result.records)
    if rate > 0.1:
        logger.warning(f"Unclassified の割合が {rate:.1%} です (10% 超)")


# --- 集計 ---

def robustness(records: Iterable[RunRecord]) -> float:
    """共有インフラが残った run の割合 (失敗した run は残らなかったものとして数える)"""
    records = list(records)
    if not records:
        raise ValueError("robustness of an empty record set is undefined")
    return sum(1 for r in records if r.persisted and not r.failed) / len(records)


DETERMINISTIC_CELL_KEYS = ("variant", "psi", "f_s", "T_e", "sigma_R", "incumbent_label")
STOCHASTIC_CELL_KEYS = ("T_s", "a", "variant", "psi", "f_s", "labor_cap", "T_e", "sigma_R")


def _group(records: Iterable[RunRecord], keys: Sequence[str]) -> Dict[Tuple, List[RunRecord]]:
    groups: Dict[Tuple, List[RunRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    return groups


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def summarize_cell(records: List[RunRecord]) -> Dict[str, Any]:
    ok = [r for r in records if not r.failed]
    counts = Counter(r.classification for r in records)
    row = {
        "n_runs": len(records),
        "n_failed": len(records) - len(ok),
        "robustness": robustness(records),
        "mean_welfare": _mean([r.welfare for r in ok]),
        "mean_gini": _mean([r.gini for r in ok]),
    }
    for c in Classification:
        row[f"n_{c.value}"] = counts.get(c.value, 0)
    return row


def aggregate_robustness(records: Sequence[RunRecord], keys: Sequence[str]) -> List[Dict[str, Any]]:
    """keys で分けた各構成の頑健性 (安全な操作空間の割合) と平均厚生"""
    return [
        {**dict(zip(keys, key)), **summarize_cell(group)}
        for key, group in _group(records, keys).items()
    ]


def marginals(records: Sequence[RunRecord], p: ModelParams) -> List[Dict[str, Any]]:
    """
    確率的スイープのセル頑健性を T_e ごと・sigma_R ごとに平均する。
    正規化した軸 T_e*delta と sigma_R/beta_l も併記する。
    """
    cells = aggregate_robustness(records, STOCHASTIC_CELL_KEYS)
    outer = ("T_s", "a", "variant", "psi", "f_s", "labor_cap")
    rows: List[Dict[str, Any]] = []
    for axis, other, scale in (("T_e", "sigma_R", p.delta), ("sigma_R", "T_e", 1.0 / p.beta_l)):
        groups: Dict[Tuple, List[Dict[str, Any]]] = {}
        for cell in cells:
            groups.setdefault(tuple(cell[k] for k in outer) + (cell[axis],), []).append(cell)
        for key, group in groups.items():
            value = key[-1]
            rows.append({
                **dict(zip(outer, key[:-1])),
                "axis": axis,
                "value": value,
                "normalized": value * scale,
                "mean_robustness": _mean([c["robustness"] for c in group]),
                "n_cells": len(group),
                "n_runs": sum(c["n_runs"] for c in group),
            })
    return rows


def paired_difference(records: Sequence[RunRecord], side, a_side: str, b_side: str,
                      match_keys: Sequence[str]) -> List[Dict[str, Any]]:
    """
    side(record) が a_side と b_side の run を、match_keys が一致するもの同士で比べて差 (a - b) を返す。
    """
    sides: Dict[str, Dict[Tuple, List[RunRecord]]] = {a_side: {}, b_side: {}}
    for r in records:
        label = side(r)
        if label in sides:
            sides[label].setdefault(tuple(getattr(r, k) for k in match_keys), []).append(r)
    rows = []
    for key, group_a in sides[a_side].items():
        group_b = sides[b_side].get(key)
        if not group_b:
            continue
        sa = summarize_cell(group_a)
        sb = summarize_cell(group_b)
        row = dict(zip(match_keys, key))
        row.update({
            f"robustness_{a_side}": sa["robustness"],
            f"robustness_{b_side}": sb["robustness"],
            "d_robustness": sa["robustness"] - sb["robustness"],
            "d_welfare": sa["mean_welfare"] - sb["mean_welfare"],
            "d_gini": sa["mean_gini"] - sb["mean_gini"],
        })
        for c in Classification:
            row[f"d_n_{c.value}"] = sa[f"n_{c.value}"] - sb[f"n_{c.value}"]
        rows.append(row)
    return rows


def influence_effect(records: Sequence[RunRecord], kind: str = "deterministic") -> List[Dict[str, Any]]:
    """平等な影響力 (Equal/MedianVoter) と所得比例 (IncomeBased/EliteCapture) の頑健性の差"""
    coords = ("psi", "f_s", "T_e", "sigma_R")
    if kind == "deterministic":
        keys = ("variant_family",) + coords + ("incumbent_label", "d_Is", "d_mu")
    else:
        keys = ("variant_family", "T_s", "a", "labor_cap") + coords
    return paired_difference(records, lambda r: r.influence_side, "equal", "income", keys)


def incumbent_effect(records: Sequence[RunRecord]) -> List[Dict[str, Any]]:
    """初期の現職が増税寄り (TF) の場合と増税反発 (TR) の場合の差"""
    keys = ("variant", "psi", "f_s", "T_e", "sigma_R", "d_Is", "d_mu")
    return paired_difference(records, lambda r: r.incumbent_label, "TF", "TR", keys)
