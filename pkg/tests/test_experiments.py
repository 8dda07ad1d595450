from dataclasses import replace

import numpy as np
import pytest

import experiments
from experiments import (
    Classification,
    InitialConditions,
    RunDescriptor,
    RunRecord,
    ShockRegime,
    SweepGrid,
    SweepResult,
    aggregate_robustness,
    build_schedule,
    classify_equilibrium,
    derive_seed,
    deterministic_descriptors,
    incumbent_effect,
    incumbent_label,
    influence_effect,
    marginals,
    prepare_run,
    resolve_incumbent,
    robustness,
    run_deterministic_sweep,
    sample_shock_series,
    stochastic_descriptors,
    summarize_run,
    tau_oscillations,
    two_group_gini,
    welfare_stats,
)
from infrastructure_model import STATE_FIELDS, STATE_SIZE
from integrator import EventKind, SolverControls, Trajectory
from model_params import default_params

SHORT = SolverControls(horizon=2.0, output_dt=0.5)


def _constant_trajectory(p, horizon=100.0, **values):
    """指定した値で一定の軌道 (分類・厚生のテスト用)"""
    times = np.linspace(0.0, horizon, 101)
    row = np.zeros(STATE_SIZE)
    for name, v in values.items():
        row[STATE_FIELDS.index(name)] = v
    states = np.tile(row, (len(times), 1))
    return Trajectory(times=times, states=states, incumbents=np.ones(len(times), dtype=int), params=p)


def _record(run_id=0, **changes):
    base = dict(
        run_id=run_id, variant="DirectAgg-MV-Cold", psi=0, alpha=0.0, T_e=4.0, sigma_R=0.15,
        d_Is=0.5, d_mu=0.0, T_s=None, a=None, f_s=0.2, labor_cap=None, seed=0, incumbent0=1,
        incumbent_label="TR", Is_final=3.0, classification="FullShared", persisted=True,
        welfare=2.0, gini=0.3, failed=False,
    )
    base.update(changes)
    return RunRecord(**base)


# --- ショック系列 ---

def test_shock_series_statistics():
    """到着数は horizon/T_s 前後、規模は (0, 1] で平均はおおよそ a"""
    regime = ShockRegime(T_s=8.0, a=0.1, horizon=4000.0)
    shocks = sample_shock_series(regime, np.random.default_rng(42))
    times = [t for t, _ in shocks]
    sizes = np.array([m for _, m in shocks])
    assert 400 < len(shocks) < 600
    assert times == sorted(times)
    assert all(0 < t <= 4000.0 for t in times)
    assert np.all((sizes > 0) & (sizes <= 1))
    assert sizes.mean() == pytest.approx(0.1, abs=0.02)


def test_mean_shock_count_over_many_series():
    """T_s = 8, horizon 400 の系列 400 本で到着数の平均は 50 前後 (3 sigma 以内)"""
    regime = ShockRegime(T_s=8.0, a=0.1, horizon=400.0)
    counts = [len(sample_shock_series(regime, np.random.default_rng(derive_seed(0, k)))) for k in range(400)]
    assert 45 <= np.mean(counts) <= 55


def test_shock_series_is_reproducible_from_seed():
    regime = ShockRegime(T_s=50.0, a=0.25, horizon=400.0, seed=7)
    assert sample_shock_series(regime) == sample_shock_series(regime)
    other = ShockRegime(T_s=50.0, a=0.25, horizon=400.0, seed=8)
    assert sample_shock_series(regime) != sample_shock_series(other)


def test_fixed_magnitude_distribution():
    regime = ShockRegime(T_s=10.0, a=0.25, horizon=200.0, seed=1)
    shocks = sample_shock_series(regime, magnitude="fixed")
    assert shocks
    assert all(m == 0.25 for _, m in shocks)


def test_shock_regime_validation():
    with pytest.raises(ValueError):
        ShockRegime(T_s=0.0, a=0.1)
    with pytest.raises(ValueError):
        ShockRegime(T_s=8.0, a=1.5)
    assert ShockRegime(T_s=8.0, a=0.1).label == "Ts8_a0.1"


def test_schedule_has_elections_only_under_party_competition():
    shocks = [(3.0, 0.2)]
    polcomp = build_schedule(default_params(variant="PolComp-Eq"), 20.0, shocks)
    direct = build_schedule(default_params(variant="DirectAgg-MV-Cold"), 20.0, shocks)
    assert polcomp.count(EventKind.ELECTION) == 5
    assert direct.count(EventKind.ELECTION) == 0
    assert direct.count(EventKind.CAPACITY_SHOCK) == 1


def test_derive_seed():
    assert derive_seed(0, 5) == derive_seed(0, 5)
    assert derive_seed(0, 5) != derive_seed(0, 6)
    assert derive_seed(0, 5) != derive_seed(1, 5)


def test_resolve_incumbent():
    """TR は増税反発 (bias -1) の候補者1、TF は増税寄り (bias +1) の候補者2"""
    p = default_params()
    assert resolve_incumbent("TR", p) == 1
    assert resolve_incumbent("TF", p) == 2
    assert incumbent_label(2, p) == "TF"
    drawn = {resolve_incumbent("random", p, np.random.default_rng(s)) for s in range(20)}
    assert drawn == {1, 2}


# --- 分類と指標 ---

def test_classify_equilibria():
    p = default_params()
    cases = [
        (dict(I_s=3.0, l1=1.0, l2=1.0), Classification.FULL_SHARED),
        (dict(), Classification.COLLAPSE),
        (dict(I_p1=0.6), Classification.ELITES_ABANDON),
        (dict(I_s=3.0, I_p1=0.6, l2=1.0), Classification.DISTINCT_SOCIETIES),
        (dict(I_s=1.0, I_p1=0.3, l1=0.5, l2=0.5), Classification.UNCLASSIFIED),
    ]
    for values, expected in cases:
        assert classify_equilibrium(_constant_trajectory(p, **values), p) == expected


def test_classification_uses_the_tail_window():
    """末尾区間だけを見るので、途中の値は分類に影響しない"""
    p = default_params()
    traj = _constant_trajectory(p, I_s=3.0, l1=1.0, l2=1.0)
    traj.states[:50, STATE_FIELDS.index("I_s")] = 0.0
    assert classify_equilibrium(traj, p) == Classification.FULL_SHARED


def test_two_group_gini():
    assert two_group_gini((1.0, 1.0), (200.0, 800.0)) == 0.0
    assert two_group_gini((1.0, 0.0), (200.0, 800.0)) == pytest.approx(0.8)
    assert two_group_gini((0.0, 0.0), (200.0, 800.0)) == 0.0


def test_welfare_of_full_shared_state():
    p = default_params()
    traj = _constant_trajectory(p, I_s=3.0, l1=1.0, l2=1.0, tau=0.1)
    stats = welfare_stats(traj, p)
    assert stats.per_capita_welfare == pytest.approx((200 * 6.75 + 800 * 1.6875) / 1000)
    assert stats.gini > 0


def test_tau_oscillations():
    p = default_params()
    traj = _constant_trajectory(p)
    traj.states[:, STATE_FIELDS.index("tau")] = 0.1 + 0.05 * np.sin(traj.times)
    assert tau_oscillations(traj, window=None) >= 10
    assert tau_oscillations(_constant_trajectory(p, tau=0.1)) == 0


def test_robustness():
    records = [_record(0), _record(1, persisted=False), _record(2, failed=True, persisted=False), _record(3)]
    assert robustness(records) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        robustness([])


# --- 1 run ---

def test_prepare_run_applies_shocks_after_expectations():
    """期待消費は無ショックの状態で合わせ、その後に容量ショックをかける"""
    p = default_params()
    desc = RunDescriptor(run_id=0, params=p, initial=InitialConditions(), ctrl=SHORT, seed=1,
                         d_Is=0.5, d_mu=1.0)
    x0, q, sched, incumbent = prepare_run(desc)
    assert x0.I_s == pytest.approx(1.5)
    assert q.groups[0].mu_p == pytest.approx(0.0025)
    assert incumbent == 1
    assert len(sched) == 0
    unshocked, _, _, _ = prepare_run(RunDescriptor(run_id=0, params=p, initial=InitialConditions(),
                                                   ctrl=SHORT, seed=1))
    assert x0.pi_hat == unshocked.pi_hat


def test_prepare_run_enforces_labor_cap():
    p = default_params()
    desc = RunDescriptor(run_id=0, params=p, initial=InitialConditions(l=(0.95, 0.9)), ctrl=SHORT,
                         seed=1, labor_cap=0.9)
    x0, _, _, _ = prepare_run(desc)
    assert x0.l[0] == 0.9


def test_recovered_run_is_not_reported_as_collapse(mocker):
    """終端で I_s が閾値を超えているのに Collapse と判定された run は Unclassified にする"""
    p = default_params()
    desc = RunDescriptor(run_id=3, params=p, initial=InitialConditions(), ctrl=SHORT, seed=1)
    traj = _constant_trajectory(p, I_s=1.0)
    mocker.patch.object(experiments, "classify_equilibrium", return_value=Classification.COLLAPSE)
    record = summarize_run(desc, traj, 1)
    assert record.persisted
    assert record.classification == "Unclassified"


def test_failed_run_counts_as_not_persisted():
    p = default_params()
    desc = RunDescriptor(run_id=0, params=p, initial=InitialConditions(), ctrl=SHORT, seed=1)
    traj = _constant_trajectory(p, I_s=3.0, l1=1.0, l2=1.0)
    traj.failed = True
    traj.failure_reason = "step size underflow"
    record = summarize_run(desc, traj, 1)
    assert record.failed
    assert not record.persisted
    assert record.failure_reason == "step size underflow"


# --- スイープ ---

def test_deterministic_sweep_rows_are_ordered():
    """2x2 のグリッドは run_id 順に4行"""
    grid = SweepGrid(d_Is=[0.0, 0.5], d_mu=[0.0, 1.0])
    result = run_deterministic_sweep(default_params(), grid, ctrl=SHORT)
    assert len(result) == 4
    assert [r.run_id for r in result.records] == [0, 1, 2, 3]
    assert [(r.d_Is, r.d_mu) for r in result.records] == [(0.0, 0.0), (0.0, 1.0), (0.5, 0.0), (0.5, 1.0)]
    assert result.n_failed == 0


def test_non_electoral_variants_collapse_political_axes():
    """選挙のない変種では T_e, sigma_R, 現職の次元を展開しない"""
    grid = SweepGrid(d_Is=[0.5], d_mu=[0.0], T_e=[2.0, 4.0], sigma_R=[0.1, 0.2],
                     variants=["DirectAgg-MV-Cold", "PolComp-Eq"])
    descs = deterministic_descriptors(default_params(), grid, ctrl=SHORT)
    direct = [d for d in descs if d.params.variant.label == "DirectAgg-MV-Cold"]
    polcomp = [d for d in descs if d.params.variant.label == "PolComp-Eq"]
    assert len(direct) == 1
    assert len(polcomp) == 2 * 2 * 2


def test_sweep_uses_model_variant_by_default():
    descs = deterministic_descriptors(default_params(variant="DirectAgg-EC-Hot"),
                                      SweepGrid(d_Is=[0.1], d_mu=[0.0]), ctrl=SHORT)
    assert [d.params.variant.label for d in descs] == ["DirectAgg-EC-Hot"]


def test_sweep_axes_default_to_model_values():
    """T_e, sigma_R, psi, f_s の軸を指定しなければモデル側の値で1点だけ流す"""
    base = default_params(variant="PolComp-Eq", psi=1, f_s=0.1, T_e=10.0, sigma_R=0.3)
    descs = deterministic_descriptors(base, SweepGrid(d_Is=[0.1], d_mu=[0.0], incumbents=["TR"]), ctrl=SHORT)
    assert len(descs) == 1
    p = descs[0].params
    assert (p.psi, p.f_s, p.T_e, p.sigma_R) == (1, 0.1, 10.0, 0.3)

    regimes = [ShockRegime(T_s=8.0, a=0.1)]
    stoch = stochastic_descriptors(base, regimes, 2, T_e=[], sigma_R=[], ctrl=SHORT)
    assert len(stoch) == 2
    assert all((d.params.psi, d.params.T_e, d.params.sigma_R) == (1, 10.0, 0.3) for d in stoch)


def test_stochastic_descriptors():
    regimes = [ShockRegime(T_s=8.0, a=0.1), ShockRegime(T_s=50.0, a=0.25)]
    descs = stochastic_descriptors(default_params(variant="PolComp-Eq"), regimes, 3,
                                   T_e=[2.0, 5.0], sigma_R=[0.15], ctrl=SHORT, base_seed=11)
    assert len(descs) == 2 * 2 * 3
    assert all(d.initial.incumbent == "random" for d in descs)
    assert all(d.labor_cap == 0.9 for d in descs)
    assert all(d.regime.horizon == SHORT.horizon for d in descs)
    assert len({d.seed for d in descs}) == len(descs)
    with pytest.raises(ValueError):
        stochastic_descriptors(default_params(), regimes, 0, T_e=[2.0], sigma_R=[0.15])


def test_changing_one_seed_changes_only_that_row():
    regimes = [ShockRegime(T_s=1.0, a=0.2)]
    descs = stochastic_descriptors(default_params(variant="PolComp-Eq"), regimes, 4, T_e=[2.0], sigma_R=[0.15],
                                   ctrl=SolverControls(horizon=4.0, output_dt=0.5), base_seed=5)
    base = experiments.run_descriptors(descs)
    changed = list(descs)
    changed[2] = replace(descs[2], seed=descs[2].seed + 1)
    rows = experiments.run_descriptors(changed)
    for k in (0, 1, 3):
        assert rows[k].as_dict() == base[k].as_dict()
    assert rows[2].seed != base[2].seed
    assert rows[2].Is_final != base[2].Is_final


def test_sweep_results_identical_across_worker_counts():
    """ワーカー数を変えても同じ行が得られる"""
    regimes = [ShockRegime(T_s=1.0, a=0.2)]
    base = default_params(variant="PolComp-Eq")
    kwargs = dict(ctrl=SolverControls(horizon=4.0, output_dt=0.5), base_seed=3)
    serial = experiments.run_stochastic_sweep(base, regimes, 2, [2.0], [0.15], workers=1, **kwargs)
    parallel = experiments.run_stochastic_sweep(base, regimes, 2, [2.0], [0.15], workers=2, **kwargs)
    assert [r.as_dict() for r in serial.records] == [r.as_dict() for r in parallel.records]


def test_run_descriptors_in_process_uses_execute_run(mocker):
    fake = mocker.patch.object(experiments, "execute_run", side_effect=lambda d: _record(d.run_id))
    descs = deterministic_descriptors(default_params(), SweepGrid(d_Is=[0.0, 0.1, 0.2], d_mu=[0.0]), ctrl=SHORT)
    records = experiments.run_descriptors(descs, workers=1)
    assert fake.call_count == 3
    assert [r.run_id for r in records] == [0, 1, 2]


def test_sweep_result_class_counts():
    result = SweepResult("deterministic", [_record(0), _record(1, classification="Collapse")])
    counts = result.class_counts()
    assert counts["FullShared"] == 1
    assert counts["Collapse"] == 1
    assert counts["Unclassified"] == 0


# --- 集計 ---

def test_aggregate_robustness_per_cell():
    records = [
        _record(0, psi=0, persisted=True), _record(1, psi=0, persisted=False),
        _record(2, psi=1, persisted=True),
    ]
    rows = aggregate_robustness(records, ("variant", "psi"))
    by_psi = {row["psi"]: row for row in rows}
    assert by_psi[0]["robustness"] == pytest.approx(0.5)
    assert by_psi[0]["n_runs"] == 2
    assert by_psi[1]["robustness"] == 1.0


def test_influence_effect_pairs_equal_and_income_influence():
    """平等 (MV) - 所得比例 (EC) の頑健性の差を同じセル同士で計算する"""
    records = [
        _record(0, variant="DirectAgg-MV-Cold", persisted=True),
        _record(1, variant="DirectAgg-EC-Cold", alpha=1.0, persisted=False, classification="Collapse"),
    ]
    rows = influence_effect(records)
    assert len(rows) == 1
    assert rows[0]["variant_family"] == "DirectAgg-Cold"
    assert rows[0]["d_robustness"] == 1.0
    assert rows[0]["d_n_Collapse"] == -1


def test_incumbent_effect_pairs_tf_and_tr():
    records = [
        _record(0, variant="PolComp-Eq", incumbent_label="TF", persisted=True, welfare=3.0),
        _record(1, variant="PolComp-Eq", incumbent_label="TR", persisted=False, welfare=1.0),
        _record(2, variant="PolComp-Eq", incumbent_label="TF", d_Is=0.9, persisted=False),
    ]
    rows = incumbent_effect(records)
    assert len(rows) == 1
    assert rows[0]["d_robustness"] == 1.0
    assert rows[0]["d_welfare"] == pytest.approx(2.0)


def test_marginals_carry_normalized_axes():
    p = default_params()
    records = []
    for i, (T_e, sigma_R, persisted) in enumerate([(2.0, 0.15, True), (2.0, 0.3, False),
                                                   (10.0, 0.15, True), (10.0, 0.3, True)]):
        records.append(_record(i, T_e=T_e, sigma_R=sigma_R, persisted=persisted, T_s=8.0, a=0.1,
                               labor_cap=0.9, variant="PolComp-Eq"))
    rows = marginals(records, p)
    te = {row["value"]: row for row in rows if row["axis"] == "T_e"}
    sr = {row["value"]: row for row in rows if row["axis"] == "sigma_R"}
    assert te[2.0]["mean_robustness"] == pytest.approx(0.5)
    assert te[10.0]["mean_robustness"] == 1.0
    assert te[10.0]["normalized"] == pytest.approx(1.0)
    assert sr[0.3]["normalized"] == pytest.approx(2.0)
    assert sr[0.15]["mean_robustness"] == 1.0
