"""
実行設定の読み書き。

設定ファイルは `section.key = value` 形式の行 (`#` 以降はコメント)。
未知のキーはエラーにし、指定のないキーは model_defaults.json の既定値で埋める。
"""
import json
import logging
import os
from enum import Enum
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError, validator

from experiments import (
    DEFAULT_LABOR_CAP,
    PERSISTENCE_FRACTION,
    TAIL_WINDOW,
    InitialConditions,
    MagnitudeDistribution,
    ShockRegime,
    SweepGrid,
)
from integrator import SolverControls
from model_params import ModelParams, build_params

logger = logging.getLogger(__name__)

PRESETS_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "presets.json")

PRESETS: Dict[str, Any] = {}
try:
    with open(PRESETS_FILE, "r", encoding="utf-8") as f:
        PRESETS = json.load(f)
except (FileNotFoundError, json.JSONDecodeError) as e:
    logger.warning(f"presets.json の読み込みに失敗しました。プリセットなしで動作します。: {e}")

_STOCHASTIC_FALLBACK = {
    "n_series": 50,
    "n_series_full": 400,
    "variant": "PolComp-Eq",
    "psi": 1,
    "T_e": [2.0, 5.0, 10.0, 20.0, 30.0],
    "sigma_R": [0.075, 0.15, 0.225, 0.3],
}


def _preset(*keys: str) -> Any:
    """presets.json の入れ子になったキーをたどる。途中で見つからなければ None"""
    node: Any = PRESETS
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            return None
        node = node[key]
    return node


def standard_regimes() -> List[ShockRegime]:
    """高頻度・中頻度・低頻度の3つのショック体制"""
    regimes = _preset("regimes")
    if not regimes:
        return [ShockRegime(T_s=8.0, a=0.1), ShockRegime(T_s=50.0, a=0.25), ShockRegime(T_s=150.0, a=0.5)]
    return [ShockRegime(T_s=r["T_s"], a=r["a"]) for r in regimes.values()]


def _linspace_preset(axis: str, start: float, stop: float, num: int) -> List[float]:
    grid = _preset("sweeps", "deterministic", axis) or {}
    values = np.linspace(grid.get("start", start), grid.get("stop", stop), int(grid.get("num", num)))
    return [float(v) for v in values]


def _stochastic_preset() -> Dict[str, Any]:
    return {**_STOCHASTIC_FALLBACK, **(_preset("sweeps", "stochastic") or {})}


def stochastic_preset_overrides() -> Dict[str, Any]:
    """
    確率的スイープの標準構成 (3つのショック体制、選挙競争、T_e と sigma_R の軸、系列数)。
    sweep-stoch --paper-regimes が設定キーの上書きとして使う。
    """
    preset = _stochastic_preset()
    return {
        "stochastic.regimes": [r.dict() for r in standard_regimes()],
        "stochastic.n_series": int(preset["n_series"]),
        "model.variant": preset["variant"],
        "model.psi": int(preset["psi"]),
        "sweep.Te": [float(v) for v in preset["T_e"]],
        "sweep.sigma_R": [float(v) for v in preset["sigma_R"]],
    }


def full_series_count() -> int:
    """本番規模の系列数 (--full)"""
    return int(_stochastic_preset()["n_series_full"])


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


class ExperimentKind(str, Enum):
    SIMULATE = "simulate"
    SWEEP_DET = "sweep-det"
    SWEEP_STOCH = "sweep-stoch"


class ShockSettings(BaseModel):
    """simulate で t=0+ に与える容量ショックと機会ショック"""
    d_Is: float = 0.0
    d_mu: float = 0.0

    class Config:
        frozen = True

    @validator("d_Is")
    def _fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("d_Is must be in [0, 1]")
        return v


def _default_grid() -> SweepGrid:
    return SweepGrid(
        d_Is=_linspace_preset("d_Is", 0.0, 1.0, 21),
        d_mu=_linspace_preset("d_mu", 0.0, 2.0, 21),
    )


class StochasticSettings(BaseModel):
    regimes: List[ShockRegime] = []
    n_series: int = 50
    magnitude: MagnitudeDistribution = MagnitudeDistribution.TRUNCEXP
    labor_cap: List[Optional[float]] = [DEFAULT_LABOR_CAP]

    class Config:
        frozen = True

    @validator("n_series")
    def _positive(cls, v):
        if v < 1:
            raise ValueError("n_series must be >= 1")
        return v

    @validator("labor_cap", each_item=True)
    def _cap(cls, v):
        if v is not None and not 0.0 < v <= 1.0:
            raise ValueError("labor_cap must be in (0, 1] or none")
        return v


class RunConfig(BaseModel):
    params: ModelParams
    initial: InitialConditions = InitialConditions()
    shock: ShockSettings = ShockSettings()
    grid: SweepGrid
    stochastic: StochasticSettings
    solver: SolverControls = SolverControls()
    experiment: ExperimentKind = ExperimentKind.SIMULATE
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"

    class Config:
        frozen = True

    @validator("workers")
    def _workers(cls, v):
        if v < 1:
            raise ValueError("workers must be >= 1")
        return v


# --- 値の変換 ---

def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text}")
    return int(value)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true or false, got {text}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.lower() in ("auto", "none") else float(text)


def _items(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _pair(conv: Callable[[str], Any]) -> Callable[[str], Tuple[Any, Any]]:
    def parse(text: str) -> Tuple[Any, Any]:
        items = _items(text)
        if len(items) != 2:
            raise ValueError(f"expected two comma separated values, got '{text}'")
        return conv(items[0]), conv(items[1])
    return parse


def _list(conv: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        return [conv(item) for item in _items(text)]
    return parse


def _regimes(text: str) -> List[Dict[str, float]]:
    regimes = []
    for item in _items(text):
        T_s, sep, a = item.partition(":")
        if not sep:
            raise ValueError(f"regimes are written T_s:a, got '{item}'")
        regimes.append({"T_s": float(T_s), "a": float(a)})
    return regimes


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


class ConfigKey(NamedTuple):
    section: str
    field: str
    parse: Callable[[str], Any]

    @property
    def name(self) -> str:
        return f"{self.section}.{self.field}"


_MODEL_FLOATS = ("R", "mu", "delta", "h", "w", "xi", "beta_l", "beta_s", "beta_tau1", "beta_tau2",
                 "sigma_A", "sigma_R", "T_e", "omega", "f_s", "I_bar")

CONFIG_KEYS: Tuple[ConfigKey, ...] = (
    ConfigKey("model", "variant", str),
    ConfigKey("model", "psi", _int),
    ConfigKey("model", "alpha", _opt_float),
    *(ConfigKey("model", name, _float) for name in _MODEL_FLOATS),
    ConfigKey("model", "I_0", _opt_float),
    ConfigKey("model", "candidate_biases", _pair(_int)),
    ConfigKey("model", "savings_decay_factor", _bool),
    ConfigKey("model", "opportunity_shock_mode", str),
    ConfigKey("group", "n", _pair(_float)),
    ConfigKey("group", "phi", _pair(_float)),
    ConfigKey("group", "mu_p", _pair(_float)),
    ConfigKey("group", "theta", _pair(_int)),
    ConfigKey("group", "y0", _pair(_float)),
    ConfigKey("initial", "l", _pair(_float)),
    ConfigKey("initial", "I_p_frac", _pair(_float)),
    ConfigKey("initial", "s", _pair(_float)),
    ConfigKey("initial", "I_s", _opt_float),
    ConfigKey("initial", "tau", _opt_float),
    ConfigKey("initial", "incumbent", str),
    ConfigKey("shock", "d_Is", _float),
    ConfigKey("shock", "d_mu", _float),
    ConfigKey("sweep", "d_Is", _list(_float)),
    ConfigKey("sweep", "d_mu", _list(_float)),
    ConfigKey("sweep", "Te", _list(_float)),
    ConfigKey("sweep", "sigma_R", _list(_float)),
    ConfigKey("sweep", "variants", _list(str)),
    ConfigKey("sweep", "incumbents", _list(str)),
    ConfigKey("sweep", "psi", _list(_int)),
    ConfigKey("sweep", "f_s", _list(_float)),
    ConfigKey("stochastic", "regimes", _regimes),
    ConfigKey("stochastic", "n_series", _int),
    ConfigKey("stochastic", "magnitude", str),
    ConfigKey("stochastic", "labor_cap", _list(_opt_float)),
    ConfigKey("solver", "method", str),
    ConfigKey("solver", "rtol", _float),
    ConfigKey("solver", "atol", _float),
    ConfigKey("solver", "dt_init", _float),
    ConfigKey("solver", "dt_max", _float),
    ConfigKey("solver", "output_dt", _float),
    ConfigKey("solver", "horizon", _float),
    ConfigKey("solver", "adaptive", _bool),
    ConfigKey("solver", "max_steps", _int),
    ConfigKey("run", "experiment", str),
    ConfigKey("run", "seed", _int),
    ConfigKey("run", "workers", _int),
    ConfigKey("run", "output_dir", str),
)
_KEYS_BY_NAME = {k.name: k for k in CONFIG_KEYS}

# 設定キーとモデル側のフィールド名が異なるもの
_SWEEP_FIELDS = {"Te": "T_e"}


def _resolve_key(key: str, line: Optional[int] = None) -> str:
    """接頭辞のないキーはモデルのパラメータとして扱う (例: delta -> model.delta)"""
    if key in _KEYS_BY_NAME:
        return key
    if "." not in key and f"model.{key}" in _KEYS_BY_NAME:
        return f"model.{key}"
    raise ConfigError("unknown key", key=key, line=line)


def _read_lines(text: str) -> Tuple[Dict[str, Any], Dict[str, int]]:
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError("expected 'key = value'", line=n)
        key = _resolve_key(key.strip(), line=n)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=n)
        try:
            values[key] = _KEYS_BY_NAME[key].parse(value.strip())
        except ValueError as e:
            raise ConfigError(str(e), key=key, line=n)
        lines[key] = n
    return values, lines


def _error_key(section: str, loc: Tuple) -> Optional[str]:
    if not loc or loc[0] == "__root__":
        return None
    if section == "model" and loc[0] == "groups" and len(loc) >= 3:
        return f"group.{loc[2]}"
    field = loc[0]
    if section == "sweep":
        field = {v: k for k, v in _SWEEP_FIELDS.items()}.get(field, field)
    return f"{section}.{field}"


def _validated(section: str, lines: Dict[str, int], build: Callable[[], Any]) -> Any:
    try:
        return build()
    except ValidationError as e:
        err = e.errors()[0]
        key = _error_key(section, tuple(err.get("loc", ())))
        raise ConfigError(err.get("msg", str(e)), key=key, line=lines.get(key) if key else None)
    except ValueError as e:
        raise ConfigError(str(e))


def config_from_values(values: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """`section.key` -> 値 の辞書から RunConfig を組み立てる"""
    lines = lines or {}
    by_section: Dict[str, Dict[str, Any]] = {}
    for name, value in values.items():
        section, _, field = name.partition(".")
        by_section.setdefault(section, {})[field] = value

    model = dict(by_section.get("model", {}))
    groups = {k: list(v) for k, v in by_section.get("group", {}).items()}
    params = _validated("model", lines, lambda: build_params(model=model, groups=groups))

    initial = _validated("initial", lines, lambda: InitialConditions(**by_section.get("initial", {})))
    shock = _validated("shock", lines, lambda: ShockSettings(**by_section.get("shock", {})))

    sweep = {_SWEEP_FIELDS.get(k, k): v for k, v in by_section.get("sweep", {}).items()}
    grid = _validated("sweep", lines, lambda: SweepGrid(**{**_default_grid().dict(), **sweep}))

    stochastic_values = dict(by_section.get("stochastic", {}))
    stochastic_values.setdefault("regimes", [r.dict() for r in standard_regimes()])
    stochastic_values.setdefault("n_series", int(_stochastic_preset()["n_series"]))
    stochastic = _validated("stochastic", lines, lambda: StochasticSettings(**stochastic_values))

    solver = _validated("solver", lines, lambda: SolverControls(**by_section.get("solver", {})))
    run = by_section.get("run", {})
    return _validated("run", lines, lambda: RunConfig(
        params=params, initial=initial, shock=shock, grid=grid, stochastic=stochastic,
        solver=solver, **run,
    ))


def parse_config(text: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    設定テキストを解析する。overrides (`section.key` -> 値) はファイルの値より優先する。
    """
    values, lines = _read_lines(text)
    for key, value in (overrides or {}).items():
        key = _resolve_key(key)
        if isinstance(value, str):
            try:
                value = _KEYS_BY_NAME[key].parse(value)
            except ValueError as e:
                raise ConfigError(str(e), key=key)
        values[key] = value
        lines.pop(key, None)
    return config_from_values(values, lines)


def load_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    設定ファイルを読む。manifest.json を渡した場合は埋め込まれた設定テキストを使う。
    """
    text = ""
    if path:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        if path.endswith(".json"):
            try:
                text = json.loads(text)["config_text"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"{path} is not a manifest with embedded config_text: {e}")
    return parse_config(text, overrides)


def preset_overrides(name: str) -> Dict[str, Any]:
    """scenarios.<name> のプリセットを設定キーの辞書として返す"""
    preset = _preset("scenarios", name)
    if not isinstance(preset, dict):
        available = ", ".join(sorted(_preset("scenarios") or {}))
        raise ConfigError(f"unknown preset '{name}' (available: {available})")
    return {key: value if isinstance(value, str) else _fmt(value) for key, value in preset.items()}


def _config_value(cfg: RunConfig, key: ConfigKey) -> Any:
    section, field = key.section, key.field
    if section == "model":
        if field == "variant":
            return cfg.params.variant.label
        return getattr(cfg.params, field)
    if section == "group":
        return tuple(getattr(g, field) for g in cfg.params.groups)
    if section == "sweep":
        return getattr(cfg.grid, _SWEEP_FIELDS.get(field, field))
    if section == "stochastic":
        if field == "regimes":
            return ", ".join(f"{_fmt(float(r.T_s))}:{_fmt(float(r.a))}" for r in cfg.stochastic.regimes)
        return getattr(cfg.stochastic, field)
    if section == "run":
        return getattr(cfg, field)
    return getattr(getattr(cfg, {"initial": "initial", "shock": "shock", "solver": "solver"}[section]), field)


def resolved_values(cfg: RunConfig) -> Dict[str, str]:
    """全キーの解決済みの値 (設定ファイルと同じ表記)"""
    values = {}
    for key in CONFIG_KEYS:
        value = _config_value(cfg, key)
        if key.section == "initial" and key.field in ("I_s", "tau") and value is None:
            values[key.name] = "auto"
        else:
            values[key.name] = _fmt(value)
    return values


def render_config(cfg: RunConfig) -> str:
    """解決済みの設定をすべてのキーについて書き出す (parse_config で同じ設定に戻る)"""
    out = []
    section = None
    for name, text in resolved_values(cfg).items():
        key_section = name.partition(".")[0]
        if key_section != section:
            if section is not None:
                out.append("")
            out.append(f"# {key_section}")
            section = key_section
        out.append(f"{name} = {text}")
    return "\n".join(out) + "\n"


def decided_defaults(cfg: RunConfig) -> Dict[str, Any]:
    """マニフェストに明記する校正値と解釈上の選択"""
    p = cfg.params
    return {
        "R": p.R,
        "I_bar": p.I_bar,
        "I_0": p.I_0,
        "omega": p.omega,
        "f_s": p.f_s,
        "y0": [g.y0 for g in p.groups],
        "opportunity_shock_mode": p.opportunity_shock_mode.value,
        "savings_decay_factor": p.savings_decay_factor,
        "shock_magnitude_distribution": cfg.stochastic.magnitude.value,
        "persistence_threshold_fraction_of_I_bar": PERSISTENCE_FRACTION,
        "tail_window": TAIL_WINDOW,
        "phi_tilde": "population-weighted",
        "deterministic_shock_timing": "t=0+ after expected consumption is initialised",
        "labor_cap_scope": "stochastic sweeps only",
    }
