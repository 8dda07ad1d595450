"""
実行結果の書き出しと読み込み。

CSV はすべて csv.writer で組み立て、浮動小数点は 17 桁 (往復で値が変わらない桁数) で書く。
出力ディレクトリへの書き込みは output_lock() で排他制御する。
"""
import csv
import fcntl
import io
import json
import logging
import os
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from experiments import (
    DETERMINISTIC_CELL_KEYS,
    STOCHASTIC_CELL_KEYS,
    RunRecord,
    SweepResult,
    aggregate_robustness,
    incumbent_effect,
    influence_effect,
    marginals,
)
from infrastructure_model import STATE_FIELDS, compute_incomes
from integrator import Trajectory
from model_params import ModelParams

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1.0.0"
LOCK_FILE_NAME = ".infra_sim.lock"

RUNS_HEADER = (
    "run_id", "variant", "psi", "alpha", "T_e", "sigma_R", "d_Is", "d_mu", "T_s", "a",
    "seed", "incumbent0", "Is_final", "class", "persisted", "welfare", "gini", "failed",
)
# runs.csv の列名と RunRecord の属性名が異なるもの
_RUNS_ATTRS = {"class": "classification"}

INCOME_FIELDS = (
    "y_s1", "y_s2", "y_p1", "y_p2", "y_post1", "y_post2", "pi1", "pi2", "e1", "e2",
    "Y_s_total", "Y_p_total", "L_tilde",
)
SERIES_HEADER = ("t", "q_I") + STATE_FIELDS + INCOME_FIELDS

# プロセス内・スレッド間での再入可能なロック管理用
_global_output_lock = threading.RLock()
_lock_fds: Dict[str, int] = {}
_lock_depths: Dict[str, int] = {}


@contextmanager
def output_lock(output_dir: str):
    """
    出力ディレクトリに対する排他制御 (プロセス間およびスレッド間)。
    再入可能 (ネストした呼び出し) に対応する。
    """
    key = os.path.abspath(output_dir)
    with _global_output_lock:
        success = False
        try:
            if _lock_depths.get(key, 0) == 0:
                os.makedirs(key, exist_ok=True)
                fd = os.open(os.path.join(key, LOCK_FILE_NAME), os.O_RDWR | os.O_CREAT)
                # 他プロセスが書き込み中なら待機
                fcntl.flock(fd, fcntl.LOCK_EX)
                _lock_fds[key] = fd
            _lock_depths[key] = _lock_depths.get(key, 0) + 1
            success = True
            yield
        finally:
            if success:
                _lock_depths[key] -= 1
                if _lock_depths[key] == 0:
                    fd = _lock_fds.pop(key, None)
                    del _lock_depths[key]
                    if fd is not None:
                        fcntl.flock(fd, fcntl.LOCK_UN)
                        os.close(fd)


# --- CSV 文字列の生成 ---

def format_cell(value: Any) -> str:
    """CSV の1セル分の表記。None は空欄、bool は true/false、浮動小数点は 17 桁"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return output.getvalue()


def runs_csv(records: Sequence[RunRecord]) -> str:
    """1 run 1 行の runs.csv (run_id 順)"""
    ordered = sorted(records, key=lambda r: r.run_id)
    return _csv_text(RUNS_HEADER, (
        [getattr(r, _RUNS_ATTRS.get(col, col)) for col in RUNS_HEADER] for r in ordered
    ))


def _income_row(traj: Trajectory, i: int) -> List[float]:
    inc = compute_incomes(traj.state(i), traj.params)
    return [
        inc.y_s[0], inc.y_s[1], inc.y_p[0], inc.y_p[1], inc.y_post[0], inc.y_post[1],
        inc.pi[0], inc.pi[1], inc.e[0], inc.e[1], inc.Y_s_total, inc.Y_p_total, inc.L_tilde,
    ]


def series_csv(traj: Trajectory) -> str:
    """時刻・現職・全状態変数・所得の時系列"""
    rows = []
    for i, t in enumerate(traj.times):
        rows.append([float(t), int(traj.incumbents[i])] + [float(v) for v in traj.states[i]] + _income_row(traj, i))
    return _csv_text(SERIES_HEADER, rows)


def table_csv(rows: Sequence[Dict[str, Any]]) -> str:
    """辞書の行リストを CSV にする。列は最初に現れた順"""
    header: List[str] = []
    for row in rows:
        for k in row:
            if k not in header:
                header.append(k)
    return _csv_text(header, ([row.get(k) for k in header] for row in rows))


# --- ファイルへの書き出し ---

def write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    logger.debug(f"wrote {path}")
    return path


def write_json(path: str, data: Any) -> str:
    return write_text(path, json.dumps(data, ensure_ascii=False, indent=2) + "\n")


def aggregate_tables(result: SweepResult, p: ModelParams) -> Dict[str, List[Dict[str, Any]]]:
    """スイープの種類に応じた集計表 (ファイル名 -> 行)。比較相手のいない表は含めない"""
    records = result.records
    if not records:
        return {}
    tables: Dict[str, List[Dict[str, Any]]] = {}
    if result.kind == "stochastic":
        tables["robustness.csv"] = aggregate_robustness(records, STOCHASTIC_CELL_KEYS)
        tables["marginals.csv"] = marginals(records, p)
    else:
        tables["robustness.csv"] = aggregate_robustness(records, DETERMINISTIC_CELL_KEYS)
        incumbent_rows = incumbent_effect(records)
        if incumbent_rows:
            tables["incumbent_effect.csv"] = incumbent_rows
    influence_rows = influence_effect(records, result.kind)
    if influence_rows:
        tables["influence_effect.csv"] = influence_rows
    return tables


def write_results(output_dir: str,
                  result: Optional[SweepResult] = None,
                  traj: Optional[Trajectory] = None,
                  manifest: Optional[Dict[str, Any]] = None,
                  summary: Optional[Dict[str, Any]] = None,
                  params: Optional[ModelParams] = None) -> List[str]:
    """
    結果一式を output_dir に書き出し、書いたファイルのパスを返す。
    result があれば runs.csv と集計表、traj があれば series.csv を書く。
    I/O エラーはそのまま送出する。
    """
    written: List[str] = []
    with output_lock(output_dir):
        if result is not None:
            written.append(write_text(os.path.join(output_dir, "runs.csv"), runs_csv(result.records)))
            if params is not None:
                for name, rows in aggregate_tables(result, params).items():
                    written.append(write_text(os.path.join(output_dir, name), table_csv(rows)))
        if traj is not None:
            written.append(write_text(os.path.join(output_dir, "series.csv"), series_csv(traj)))
        if summary is not None:
            written.append(write_json(os.path.join(output_dir, "summary.json"), summary))
        if manifest is not None:
            written.append(write_json(os.path.join(output_dir, "manifest.json"), manifest))
    logger.info(f"{len(written)} ファイルを {output_dir} に書き出しました")
    return written


def build_manifest(experiment: str, config_text: str, resolved: Dict[str, str],
                   decided: Dict[str, Any], seed: int, wall_time: float,
                   rows: int, failures: int, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """再実行に必要な情報 (設定テキストと解決済みの値) と実行の記録"""
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "experiment": experiment,
        "seed": seed,
        "config_text": config_text,
        "resolved_config": resolved,
        "decided_defaults": decided,
        "wall_time_seconds": round(wall_time, 3),
        "rows": rows,
        "failures": failures,
    }
    if extra:
        manifest.update(extra)
    return manifest


# --- 読み込み ---

def read_series_csv(path: str, params: ModelParams) -> Trajectory:
    """
    series.csv を軌道として読み戻す (再分類用)。状態列以外 (所得) は読み捨てる。
    必要な列が欠けている場合は ValueError。
    """
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty")
        missing = [c for c in ("t", "q_I") + STATE_FIELDS if c not in header]
        if missing:
            raise ValueError(f"{path} is missing columns: {', '.join(missing)}")
        t_col = header.index("t")
        q_col = header.index("q_I")
        state_cols = [header.index(c) for c in STATE_FIELDS]
        times, incumbents, states = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                times.append(float(row[t_col]))
                incumbents.append(int(row[q_col]))
                states.append([float(row[c]) for c in state_cols])
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}:{line_no}: malformed row: {e}")
    if not times:
        raise ValueError(f"{path} has no samples")
    return Trajectory(
        times=np.array(times), states=np.array(states), incumbents=np.array(incumbents, dtype=int),
        params=params,
    )
