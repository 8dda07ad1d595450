"""
共有インフラと政治の連成モデルのシミュレーション CLI。

    python infra_sim.py simulate --config configs/scenario_elites_abandon.cfg
    python infra_sim.py sweep-det --config configs/sweep_user_fees.cfg --workers 4
    python infra_sim.py sweep-stoch --paper-regimes --n-series 50
    python infra_sim.py classify results/series.csv

終了コード: 0 成功、1 run の失敗または I/O エラー、2 使い方・設定の誤り。
"""
import argparse
import logging
import os
import sys
import time
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

from experiments import (
    Classification,
    RunDescriptor,
    RunRecord,
    SweepResult,
    prepare_run,
    run_deterministic_sweep,
    run_stochastic_sweep,
    summarize_run,
    tau_oscillations,
)
from integrator import integrate
from results_writer import build_manifest, read_series_csv, write_results
from run_config import (
    ConfigError,
    ExperimentKind,
    RunConfig,
    decided_defaults,
    full_series_count,
    load_config,
    preset_overrides,
    render_config,
    resolved_values,
    stochastic_preset_overrides,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_FILE_NAME = "run.log"


def setup_logging(output_dir: Optional[str] = None, verbose: bool = False, quiet: bool = False):
    """ルートロガーを設定する。output_dir を与えると run.log にも書く"""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        handlers.insert(0, logging.FileHandler(os.path.join(output_dir, LOG_FILE_NAME), encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def format_elapsed(elapsed_time: float) -> str:
    elapsed_hours = int(elapsed_time // 3600)
    elapsed_minutes = int((elapsed_time % 3600) // 60)
    elapsed_seconds = int(elapsed_time % 60)

    if elapsed_hours > 0:
        return f"{elapsed_hours}h {elapsed_minutes}m {elapsed_seconds}s"
    if elapsed_minutes > 0:
        return f"{elapsed_minutes}m {elapsed_seconds}s"
    return f"{elapsed_time:.2f}s"


class ExperimentRunner:
    """解決済みの設定で1つの実験を実行し、結果を書き出す"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.config_text = render_config(cfg)

    def run(self) -> int:
        kind = self.cfg.experiment
        logger.info(f"実験: {kind.value} / 変種: {self.cfg.params.variant.label} / psi={self.cfg.params.psi} "
                    f"/ seed={self.cfg.seed} / workers={self.cfg.workers}")
        logger.debug("解決済みの設定:\n" + self.config_text)
        start_time = time.time()
        if kind == ExperimentKind.SIMULATE:
            records = self.simulate(start_time)
        elif kind == ExperimentKind.SWEEP_DET:
            records = self.sweep(start_time, run_deterministic_sweep(
                self.cfg.params, self.cfg.grid, self.cfg.initial, self.cfg.solver,
                base_seed=self.cfg.seed, workers=self.cfg.workers,
            ))
        else:
            st = self.cfg.stochastic
            records = self.sweep(start_time, run_stochastic_sweep(
                self.cfg.params, st.regimes, st.n_series, self.cfg.grid.T_e, self.cfg.grid.sigma_R,
                workers=self.cfg.workers, variants=self.cfg.grid.variants or None,
                psi=self.cfg.grid.psi, f_s=self.cfg.grid.f_s, labor_caps=st.labor_cap,
                initial=self.cfg.initial, ctrl=self.cfg.solver, base_seed=self.cfg.seed,
                magnitude=st.magnitude.value,
            ))
        n_failed = self.report(records, time.time() - start_time)
        return 1 if n_failed else 0

    def _manifest(self, wall_time: float, records: Sequence[RunRecord], extra: Dict[str, Any]) -> Dict[str, Any]:
        return build_manifest(
            experiment=self.cfg.experiment.value, config_text=self.config_text,
            resolved=resolved_values(self.cfg), decided=decided_defaults(self.cfg),
            seed=self.cfg.seed, wall_time=wall_time, rows=len(records),
            failures=sum(1 for r in records if r.failed), extra=extra,
        )

    def simulate(self, start_time: float) -> List[RunRecord]:
        """1本の軌道を積分して series.csv / runs.csv / summary.json を書く"""
        cfg = self.cfg
        desc = RunDescriptor(
            run_id=0, params=cfg.params, initial=cfg.initial, ctrl=cfg.solver, seed=cfg.seed,
            d_Is=cfg.shock.d_Is, d_mu=cfg.shock.d_mu,
        )
        x0, p, sched, incumbent = prepare_run(desc)
        traj = integrate(x0, p, sched, cfg.solver)
        record = summarize_run(desc, traj, incumbent)
        summary = {
            "classification": record.classification,
            "persisted": record.persisted,
            "Is_final": record.Is_final,
            "welfare": record.welfare,
            "gini": record.gini,
            "tau_oscillations": tau_oscillations(traj),
            "events": len(traj.events),
            "terminal_time": traj.terminal_time,
            "failed": traj.failed,
            "failure_reason": traj.failure_reason,
        }
        result = SweepResult("simulate", [record])
        write_results(
            cfg.output_dir, result=result, traj=traj, summary=summary,
            manifest=self._manifest(time.time() - start_time, result.records, {"samples": len(traj.times)}),
        )
        return result.records

    def sweep(self, start_time: float, result: SweepResult) -> List[RunRecord]:
        write_results(
            self.cfg.output_dir, result=result, params=self.cfg.params,
            manifest=self._manifest(time.time() - start_time, result.records,
                                    {"class_counts": result.class_counts()}),
        )
        return result.records

    def report(self, records: Sequence[RunRecord], elapsed_time: float) -> int:
        """最終サマリーを出力し、失敗した run の数を返す"""
        failed = [r for r in records if r.failed]
        persisted = sum(1 for r in records if r.persisted)
        counts = SweepResult(self.cfg.experiment.value, list(records)).class_counts()

        logger.info("-" * 60)
        logger.info(f"Experiment Completed at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        logger.info(f"Total Time Elapsed   : {format_elapsed(elapsed_time)}")
        logger.info(f"Total Runs (rows)    : {len(records)}")
        logger.info(f"Persisted            : {persisted}")
        logger.info(f"Failed               : {len(failed)}")
        for c in Classification:
            logger.info(f"  {c.value:<19}: {counts[c.value]}")
        logger.info(f"Output Directory     : {self.cfg.output_dir}")

        if failed:
            logger.info("Detailed Failure List:")
            for r in failed[:20]:
                logger.info(f"  - run {r.run_id} (seed {r.seed}): {r.failure_reason}")
            if len(failed) > 20:
                logger.info(f"  ... and {len(failed) - 20} more")
        logger.info("-" * 60)
        return len(failed)


def classify_series(series_path: str, config_path: Optional[str]) -> Dict[str, Any]:
    """
    書き出し済みの series.csv を再分類する。
    config_path を省略すると同じディレクトリの manifest.json から設定を復元する。
    """
    if config_path is None:
        config_path = os.path.join(os.path.dirname(os.path.abspath(series_path)), "manifest.json")
        if not os.path.exists(config_path):
            raise ConfigError(f"no --config given and no manifest.json beside {series_path}")
    cfg = load_config(config_path)
    desc = RunDescriptor(
        run_id=0, params=cfg.params, initial=cfg.initial, ctrl=cfg.solver, seed=cfg.seed,
        d_Is=cfg.shock.d_Is, d_mu=cfg.shock.d_mu,
    )
    _, p, _, _ = prepare_run(desc)
    traj = read_series_csv(series_path, p)
    record = summarize_run(desc, traj, int(traj.incumbents[0]))
    return {
        "series": series_path,
        "classification": record.classification,
        "persisted": record.persisted,
        "Is_final": record.Is_final,
        "welfare": record.welfare,
        "gini": record.gini,
        "tau_oscillations": tau_oscillations(traj),
    }


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="設定ファイル (section.key = value 形式) または manifest.json")
    common.add_argument("--output-dir", "-o", help="出力ディレクトリ (run.output_dir より優先)")
    common.add_argument("--seed", type=int, help="乱数の基準シード")
    common.add_argument("--workers", "-j", type=int, help="並列実行するプロセス数")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="設定キーを上書きする (複数指定可)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="DEBUG ログを出す")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="WARNING 以上だけを出す")

    parser = argparse.ArgumentParser(
        prog="infra_sim", description="Shared infrastructure / politics simulation",
    )
    sub = parser.add_subparsers(dest="command", metavar="{simulate,sweep-det,sweep-stoch,classify}")

    simulate = sub.add_parser("simulate", parents=[common], help="1本の軌道を積分する")
    simulate.add_argument("--preset", help="名前付きシナリオ (full_shared, collapse, elites_abandon, distinct_societies)")

    sub.add_parser("sweep-det", parents=[common], help="容量ショック x 機会ショックの決定論的スイープ")

    stoch = sub.add_parser("sweep-stoch", parents=[common], help="ランダムなショック系列による確率的スイープ")
    stoch.add_argument("--paper-regimes", action="store_true",
                       help="標準構成: 3つのショック体制、PolComp-Eq、全所得課税、T_e と sigma_R の軸")
    count = stoch.add_mutually_exclusive_group()
    count.add_argument("--n-series", type=int, help="セルごとのショック系列数")
    count.add_argument("--full", action="store_true", help="本番規模の系列数 (presets.json の n_series_full) で流す")

    classify = sub.add_parser("classify", parents=[common], help="series.csv を再分類する")
    classify.add_argument("series", help="series.csv のパス")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """コマンドラインの指定を設定キーの上書きに変換する (設定ファイルより優先)"""
    overrides: Dict[str, Any] = {}
    if getattr(args, "preset", None):
        overrides.update(preset_overrides(args.preset))
    if getattr(args, "paper_regimes", False):
        overrides.update(stochastic_preset_overrides())
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        overrides[key.strip()] = value.strip()
    if args.command != "classify":
        overrides["run.experiment"] = args.command
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.workers is not None:
        overrides["run.workers"] = args.workers
    if args.output_dir is not None:
        overrides["run.output_dir"] = args.output_dir
    if getattr(args, "n_series", None) is not None:
        overrides["stochastic.n_series"] = args.n_series
    if getattr(args, "full", False):
        overrides["stochastic.n_series"] = full_series_count()
    return overrides


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    if args.command == "classify":
        setup_logging(args.output_dir, args.verbose, args.quiet)
        try:
            result = classify_series(args.series, args.config)
        except ConfigError as e:
            print(f"infra_sim: error: {e}", file=sys.stderr)
            return 2
        except (OSError, ValueError) as e:
            logger.error(f"再分類に失敗しました: {e}")
            return 1
        logger.info(f"{args.series}: {result['classification']}")
        print(" ".join(f"{k}={v}" for k, v in result.items()))
        return 0

    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as e:
        print(f"infra_sim: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"infra_sim: error: cannot read config: {e}", file=sys.stderr)
        return 2

    setup_logging(cfg.output_dir, args.verbose, args.quiet)
    try:
        return ExperimentRunner(cfg).run()
    except OSError as e:
        logger.error(f"結果の書き出しに失敗しました: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
