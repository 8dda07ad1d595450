import pytest
from pydantic import ValidationError

from model_params import (
    Cognition,
    Influence,
    ModelParams,
    PoliticalVariant,
    PoliticsKind,
    build_params,
    default_params,
    swap_groups,
)


def test_default_params_calibration():
    """既定値: R=100, I_bar=3, I_0 は I_bar の1割, f_s=0.2"""
    p = default_params()
    assert p.R == 100.0
    assert p.I_bar == 3.0
    assert p.I_0 == pytest.approx(0.3)
    assert p.f_s == 0.2
    assert p.N == 1000.0
    assert p.variant.kind == PoliticsKind.NO_POLITICS
    assert p.alpha == 0.0


def test_variant_labels_round_trip():
    """ラベルから組み立てた変種は同じラベルに戻る"""
    for label in ("NoPolitics", "DirectAgg-MV-Cold", "DirectAgg-EC-Hot", "DirectAgg-MV-Mixed",
                  "PolComp-Eq", "PolComp-Inc"):
        assert PoliticalVariant.from_label(label).label == label


def test_variant_defaults_are_filled():
    """DirectAgg は MedianVoter / Cold、PolComp は Equal が既定"""
    direct = PoliticalVariant(kind=PoliticsKind.DIRECT_AGG)
    assert direct.influence == Influence.MEDIAN_VOTER
    assert direct.cognition == Cognition.COLD
    polcomp = PoliticalVariant.from_label("PolComp")
    assert polcomp.influence == Influence.EQUAL
    assert polcomp.cognition is None


@pytest.mark.parametrize("label", ["DirectAgg-Eq", "PolComp-MV", "PolComp-Eq-Hot", "NoPolitics-MV", "Democracy"])
def test_invalid_variant_combinations(label):
    with pytest.raises(ValueError):
        PoliticalVariant.from_label(label)


def test_alpha_follows_influence():
    """影響力ルールが alpha を決め、矛盾する alpha は拒否される"""
    assert default_params(variant="DirectAgg-EC-Cold").alpha == 1.0
    assert default_params(variant="PolComp-Inc").alpha == 1.0
    assert default_params(variant="PolComp-Eq").alpha == 0.0
    with pytest.raises(ValidationError):
        default_params(variant="PolComp-Eq", alpha=0.5)


def test_blended_requires_alpha():
    with pytest.raises(ValidationError):
        default_params(variant="PolComp-Blend")
    p = default_params(variant="PolComp-Blend", alpha=0.3)
    assert p.alpha == 0.3
    assert p.variant.influence == Influence.BLENDED


@pytest.mark.parametrize("field,value", [
    ("delta", -1.0), ("delta", 0.0), ("T_e", 0.0), ("psi", 2), ("omega", -0.1), ("sigma_R", -1.0),
])
def test_range_violations(field, value):
    with pytest.raises(ValidationError) as exc:
        default_params(**{field: value})
    assert field in str(exc.value)


def test_capacity_thresholds_must_be_ordered():
    with pytest.raises(ValidationError):
        default_params(I_0=3.0)
    with pytest.raises(ValidationError):
        default_params(I_0=-0.1)


def test_wage_must_leave_private_harvest():
    """w_tilde >= 1 (私的インフラの収穫率が0以下) は拒否される"""
    with pytest.raises(ValidationError) as exc:
        default_params(w=3.0)
    assert "w_tilde" in str(exc.value)


def test_group_validation():
    with pytest.raises(ValidationError):
        build_params(groups={"theta": [0, 1]})
    with pytest.raises(ValidationError):
        build_params(groups={"n": [0.0, 800.0]})


def test_with_updates_revalidates_and_resets_alpha():
    p = default_params(variant="DirectAgg-EC-Cold")
    q = p.with_updates(variant="DirectAgg-MV-Cold")
    assert q.alpha == 0.0
    assert p.alpha == 1.0
    with pytest.raises(ValidationError):
        p.with_updates(delta=-0.5)


def test_with_group_changes_one_group():
    p = default_params()
    q = p.with_group(0, mu_p=0.003)
    assert q.groups[0].mu_p == 0.003
    assert q.groups[1] == p.groups[1]


def test_params_are_hashable_and_frozen():
    """パラメータは不変で、キャッシュのキーに使える"""
    p = default_params()
    assert hash(p) == hash(default_params())
    with pytest.raises(TypeError):
        p.delta = 0.2


def test_swap_groups():
    p = default_params()
    q = swap_groups(p)
    assert q.groups[0] == p.groups[1]
    assert q.groups[1] == p.groups[0]
    assert isinstance(q, ModelParams)
