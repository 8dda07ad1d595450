import copy
import json
import logging
import os
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, root_validator, validator

logger = logging.getLogger(__name__)

DEFAULTS_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "model_defaults.json")

# model_defaults.json が読めない場合の組み込み既定値 (標準パラメータと校正定数)
_BUILTIN_DEFAULTS: Dict[str, Any] = {
    "model": {
        "R": 100.0, "mu": 0.001, "delta": 0.1, "h": 0.0025, "w": 0.1, "psi": 0,
        "xi": 0.1, "beta_l": 0.15, "beta_s": 0.015, "beta_tau1": 0.06, "beta_tau2": 0.06,
        "sigma_A": 0.1, "sigma_R": 0.15, "T_e": 4.0, "omega": 5.0, "f_s": 0.2,
        "I_bar": 3.0, "I_0": None, "candidate_biases": [-1, 1],
        "savings_decay_factor": True, "opportunity_shock_mode": "additive",
    },
    "groups": {
        "n": [200.0, 800.0], "phi": [30.0, 7.5], "mu_p": [0.0015, 0.0005],
        "theta": [-1, 1], "y0": [0.1, 0.1],
    },
    "initial": {"l": [0.9, 0.9], "I_p_frac": [0.5, 0.0], "s": [0.05, 0.0], "incumbent": "TR"},
    "solver": {
        "method": "tsit5", "rtol": 1e-6, "atol": 1e-9, "dt_init": 0.01, "dt_max": 0.1,
        "output_dt": 0.1, "horizon": 400.0, "adaptive": True, "max_steps": 1000000,
    },
}


def _load_defaults() -> Dict[str, Any]:
    """
    model_defaults.json から既定値を読み込む。
    読み込みに失敗した場合は警告を出して組み込みの既定値を使う。
    """
    try:
        with open(DEFAULTS_FILE, "r", encoding="utf-8") as f:
            data = json.load(f)
        merged = copy.deepcopy(_BUILTIN_DEFAULTS)
        for section, values in data.items():
            if isinstance(values, dict):
                merged.setdefault(section, {}).update(values)
        return merged
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.warning(f"{DEFAULTS_FILE} の読み込みに失敗しました。組み込みの既定値で動作します。: {e}")
        return copy.deepcopy(_BUILTIN_DEFAULTS)


MODEL_DEFAULTS = _load_defaults()


# --- 政治モデルの切り替え ---

class PoliticsKind(str, Enum):
    NO_POLITICS = "NoPolitics"
    DIRECT_AGG = "DirectAgg"
    POL_COMP = "PolComp"


class Influence(str, Enum):
    MEDIAN_VOTER = "MedianVoter"
    ELITE_CAPTURE = "EliteCapture"
    EQUAL = "Equal"
    INCOME_BASED = "IncomeBased"
    BLENDED = "Blended"  # 任意の alpha (探索用)


class Cognition(str, Enum):
    COLD = "Cold"
    HOT = "Hot"
    MIXED = "Mixed"


class OpportunityShockMode(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


# 正準的な影響力ルールが固定する alpha
INFLUENCE_ALPHA = {
    Influence.MEDIAN_VOTER: 0.0,
    Influence.ELITE_CAPTURE: 1.0,
    Influence.EQUAL: 0.0,
    Influence.INCOME_BASED: 1.0,
}

_DIRECT_AGG_INFLUENCES = (Influence.MEDIAN_VOTER, Influence.ELITE_CAPTURE, Influence.BLENDED)
_POL_COMP_INFLUENCES = (Influence.EQUAL, Influence.INCOME_BASED, Influence.BLENDED)

_INFLUENCE_LABELS = {
    Influence.MEDIAN_VOTER: "MV",
    Influence.ELITE_CAPTURE: "EC",
    Influence.EQUAL: "Eq",
    Influence.INCOME_BASED: "Inc",
    Influence.BLENDED: "Blend",
}


class PoliticalVariant(BaseModel):
    """
    税制決定プロセスの種類。
    NoPolitics (税率固定), DirectAgg (選好の直接集計), PolComp (候補者の選挙競争) のいずれか。
    """
    kind: PoliticsKind = PoliticsKind.NO_POLITICS
    influence: Optional[Influence] = None
    cognition: Optional[Cognition] = None

    class Config:
        frozen = True

    @root_validator(skip_on_failure=True)
    def _check_combination(cls, values):
        kind = values.get("kind")
        influence = values.get("influence")
        cognition = values.get("cognition")
        if kind == PoliticsKind.NO_POLITICS:
            if influence is not None or cognition is not None:
                raise ValueError("NoPolitics takes neither influence nor cognition")
        elif kind == PoliticsKind.DIRECT_AGG:
            influence = influence or Influence.MEDIAN_VOTER
            if influence not in _DIRECT_AGG_INFLUENCES:
                raise ValueError(f"DirectAgg influence must be MedianVoter, EliteCapture or Blended, got {influence.value}")
            values["influence"] = influence
            values["cognition"] = cognition or Cognition.COLD
        else:
            influence = influence or Influence.EQUAL
            if influence not in _POL_COMP_INFLUENCES:
                raise ValueError(f"PolComp influence must be Equal, IncomeBased or Blended, got {influence.value}")
            if cognition is not None:
                raise ValueError("PolComp voters follow platforms; cognition must be empty")
            values["influence"] = influence
        return values

    @property
    def label(self) -> str:
        if self.kind == PoliticsKind.NO_POLITICS:
            return "NoPolitics"
        parts = [self.kind.value, _INFLUENCE_LABELS[self.influence]]
        if self.cognition is not None:
            parts.append(self.cognition.value)
        return "-".join(parts)

    @classmethod
    def from_label(cls, label: str) -> "PoliticalVariant":
        """
        "DirectAgg-MV-Cold" や "PolComp-Inc" のようなラベルから変種を組み立てる。
        """
        parts = [p.strip() for p in label.strip().split("-") if p.strip()]
        if not parts:
            raise ValueError(f"empty political variant label: '{label}'")
        try:
            kind = PoliticsKind(parts[0])
        except ValueError:
            raise ValueError(f"unknown political variant '{label}'")
        if kind == PoliticsKind.NO_POLITICS:
            if len(parts) > 1:
                raise ValueError(f"NoPolitics takes no qualifiers: '{label}'")
            return cls(kind=kind)
        reverse = {v: k for k, v in _INFLUENCE_LABELS.items()}
        influence = None
        cognition = None
        for part in parts[1:]:
            if part in reverse:
                influence = reverse[part]
            elif part in Influence._value2member_map_:
                influence = Influence(part)
            elif part in Cognition._value2member_map_:
                cognition = Cognition(part)
            else:
                raise ValueError(f"unknown qualifier '{part}' in variant '{label}'")
        return cls(kind=kind, influence=influence, cognition=cognition)


# --- パラメータ ---

class GroupParams(BaseModel):
    """利用者グループ g のパラメータ (index 0 = エリート, 1 = 非エリート)"""
    n: float
    phi: float
    mu_p: float
    theta: int
    y0: float

    class Config:
        frozen = True

    @validator("n", "phi")
    def _positive(cls, v, field):
        if not v > 0:
            raise ValueError(f"{field.name} must be > 0")
        return v

    @validator("mu_p", "y0")
    def _non_negative(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must be >= 0")
        return v

    @validator("theta")
    def _unit_bias(cls, v):
        if v not in (-1, 1):
            raise ValueError("theta must be -1 or +1")
        return v


class ModelParams(BaseModel):
    """
    モデル全体のパラメータ。標準の既定値と校正定数 (R, I_bar, I_0, omega, f_s, y0) を持つ。
    不変条件はすべてバリデータで検査する。
    """
    groups: Tuple[GroupParams, GroupParams]
    R: float
    mu: float
    delta: float
    h: float
    w: float
    psi: int
    alpha: Optional[float] = None
    xi: float
    beta_l: float
    beta_s: float
    beta_tau1: float
    beta_tau2: float
    sigma_A: float
    sigma_R: float
    T_e: float
    omega: float
    f_s: float
    I_bar: float
    I_0: Optional[float] = None
    candidate_biases: Tuple[int, int] = (-1, 1)
    variant: PoliticalVariant = PoliticalVariant()
    savings_decay_factor: bool = True
    opportunity_shock_mode: OpportunityShockMode = OpportunityShockMode.ADDITIVE

    class Config:
        frozen = True

    @validator("variant", pre=True)
    def _variant_from_label(cls, v):
        if isinstance(v, str):
            return PoliticalVariant.from_label(v)
        return v

    @validator("psi")
    def _psi_flag(cls, v):
        if v not in (0, 1):
            raise ValueError("psi must be 0 (user fee) or 1 (total income taxing)")
        return v

    @validator("delta", "T_e", "R", "mu", "h")
    def _strictly_positive(cls, v, field):
        if not v > 0:
            raise ValueError(f"{field.name} must be > 0")
        return v

    @validator("w", "xi", "beta_l", "beta_s", "beta_tau1", "beta_tau2", "sigma_A", "sigma_R", "omega", "f_s")
    def _non_negative(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must be >= 0")
        return v

    @validator("candidate_biases")
    def _candidate_biases(cls, v):
        if any(b not in (-1, 1) for b in v):
            raise ValueError("candidate_biases must be -1 or +1")
        return v

    @root_validator(skip_on_failure=True)
    def _check_model(cls, values):
        I_bar = values["I_bar"]
        I_0 = values.get("I_0")
        if I_0 is None:
            I_0 = 0.1 * I_bar
            values["I_0"] = I_0
        if not (I_bar > I_0 >= 0):
            raise ValueError("I_bar > I_0 >= 0 is required")

        variant = values["variant"]
        alpha = values.get("alpha")
        canonical = INFLUENCE_ALPHA.get(variant.influence) if variant.influence is not None else None
        if alpha is None:
            if variant.influence == Influence.BLENDED:
                raise ValueError("alpha must be given explicitly for a Blended influence")
            alpha = canonical if canonical is not None else 0.0
        elif canonical is not None and alpha != canonical:
            raise ValueError(
                f"alpha={alpha} contradicts {variant.influence.value} (requires alpha={canonical})")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must satisfy 0 <= alpha <= 1")
        values["alpha"] = float(alpha)

        groups = values["groups"]
        N = sum(g.n for g in groups)
        phi_tilde = sum(g.n * g.phi for g in groups) / N
        w_tilde = values["w"] / (phi_tilde * values["R"] * values["h"])
        if w_tilde >= 1.0:
            raise ValueError(
                f"w_tilde = w/(phi_tilde*R*h) = {w_tilde:.6g} must be < 1 so that h_p = h(1-w_tilde) > 0")
        return values

    @property
    def N(self) -> float:
        return sum(g.n for g in self.groups)

    def with_updates(self, **changes: Any) -> "ModelParams":
        """
        値を変更した新しいパラメータを検証付きで作る。
        variant を変えた場合は alpha を再導出する。
        """
        data = self.dict()
        data["groups"] = [g.dict() for g in self.groups]
        if "variant" in changes and "alpha" not in changes:
            data["alpha"] = None
        data.update(changes)
        return ModelParams(**data)

    def with_group(self, g: int, **changes: Any) -> "ModelParams":
        groups = list(self.groups)
        groups[g] = GroupParams(**{**groups[g].dict(), **changes})
        return self.with_updates(groups=[grp.dict() for grp in groups])


def build_params(model: Optional[Dict[str, Any]] = None,
                 groups: Optional[Dict[str, Any]] = None,
                 variant: Any = None) -> ModelParams:
    """
    既定値に上書き値を重ねて ModelParams を組み立てる。
    groups はキーごとに2要素のリスト (n, phi, mu_p, theta, y0) で与える。
    """
    model_values = {**MODEL_DEFAULTS["model"], **(model or {})}
    group_values = {**MODEL_DEFAULTS["groups"], **(groups or {})}
    group_list = [
        {key: group_values[key][g] for key in ("n", "phi", "mu_p", "theta", "y0")}
        for g in range(2)
    ]
    if variant is not None:
        model_values["variant"] = variant
    return ModelParams(groups=group_list, **model_values)


def default_params(**overrides: Any) -> ModelParams:
    """既定値のパラメータ。キーワード引数でモデルレベルの値を上書きできる。"""
    variant = overrides.pop("variant", None)
    return build_params(model=overrides, variant=variant)


def swap_groups(p: ModelParams) -> ModelParams:
    """グループのラベルを入れ替えたパラメータを返す (対称性の検証用)"""
    return p.with_updates(groups=[p.groups[1].dict(), p.groups[0].dict()])
