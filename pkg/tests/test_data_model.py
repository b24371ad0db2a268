import json

import pytest

from aemonitor.data_model import (
    Active,
    BlindedMixture,
    CovariateEntry,
    CovariateSchema,
    DataError,
    Placebo,
    SchemaError,
    arm_proportion_mixture,
    dataset_to_csv,
    empirical_rates,
    mixture_from_masses,
    parse_dataset,
    parse_dose_label,
    to_blinded,
    validate,
)


def test_parse_full_case_study(case_dataset):
    assert case_dataset.n_units == 23
    current = [case_dataset.units[i] for i in case_dataset.current_indices()]
    assert len(current) == 3
    assert not case_dataset.blinded


def test_parse_builds_sex_proportion(case_dataset):
    placebo = case_dataset.units[0]
    assert placebo.covariates["Sex"] == pytest.approx(47 / 78, rel=1e-15)


def test_parse_intervention_codes(case_dataset):
    assert isinstance(case_dataset.units[0].intervention, Placebo)
    assert case_dataset.units[1].intervention == Active("Abrocitinib", 3)
    # loading regimen maps to the loading dose's ladder level
    rit_200_50 = next(u for u in case_dataset.units
                      if u.dose_label == "200mg-50mg")
    assert rit_200_50.intervention == Active("Ritlecitinib", 5)


def test_parse_rejects_bad_exposure(case_csv, schema_json):
    broken = case_csv.replace("5257", "abc", 1)
    with pytest.raises(DataError, match="column 't'"):
        parse_dataset(broken, schema_json)


def test_parse_rejects_missing_column(case_csv, schema_json):
    lines = case_csv.splitlines()
    lines[0] = lines[0].replace("SAE", "events")
    with pytest.raises(DataError, match="SAE"):
        parse_dataset("\n".join(lines), schema_json)


def test_parse_rejects_off_ladder_dose(case_csv, schema_json):
    broken = case_csv.replace("Abrocitinib,100mg", "Abrocitinib,75mg", 1)
    with pytest.raises(DataError, match="ladder"):
        parse_dataset(broken, schema_json)


def test_parse_rejects_duplicate_rows(case_csv, schema_json):
    lines = case_csv.splitlines()
    duplicated = "\n".join(lines + [lines[1]])
    with pytest.raises(DataError, match="duplicate"):
        parse_dataset(duplicated, schema_json)


def test_dose_label_parsing():
    assert parse_dose_label("100mg") == 100.0
    assert parse_dose_label("200mg-50mg") == 200.0
    with pytest.raises(DataError):
        parse_dose_label("unknown")


def test_empirical_rates(case_dataset):
    rates = empirical_rates(case_dataset)
    assert rates["NCT03575871:Placebo"] == pytest.approx(1 / 5257)
    assert round(rates["NCT03575871:Abrocitinib 100mg"] * 1e4, 2) == 4.03
    zero = rates["NCT02780167:Abrocitinib 30mg"]
    assert zero == 0.0


def test_round_trip(case_dataset, schema_json):
    text = dataset_to_csv(case_dataset)
    again = parse_dataset(text, schema_json)
    assert again == case_dataset


def test_to_blinded_merges_current_study(case_dataset):
    blinded = to_blinded(case_dataset)
    assert blinded.n_units == 21
    merged = blinded.units[blinded.current_indices()[0]]
    assert merged.y == 1 + 5 + 2
    assert merged.t == pytest.approx(5257 + 12419 + 12617)
    assert merged.y / merged.t == pytest.approx(8 / 30293)
    assert isinstance(merged.intervention, BlindedMixture)
    # totals conserved
    assert sum(u.y for u in blinded.units) == sum(u.y for u in case_dataset.units)
    assert sum(u.t for u in blinded.units) == pytest.approx(
        sum(u.t for u in case_dataset.units))


def test_to_blinded_merged_covariates(case_dataset):
    merged = to_blinded(case_dataset).units[0]
    assert merged.covariates["Condition"] == "Atopic Dermatitis"
    assert merged.covariates["Sex"] == pytest.approx((47 + 94 + 88) / 391)


def test_arm_proportion_mixture(case_dataset):
    nu = arm_proportion_mixture(case_dataset)
    assert nu.mass(Placebo()) == pytest.approx(78 / 391)
    assert sum(m for _, m in nu.components) == pytest.approx(1.0, abs=1e-12)


def test_to_blinded_rejects_wrong_support(case_dataset):
    nu = mixture_from_masses({Placebo(): 0.5, Active("Ritlecitinib", 1): 0.5})
    with pytest.raises(DataError, match="support"):
        to_blinded(case_dataset, nu)


def test_to_blinded_twice_rejected(case_dataset):
    with pytest.raises(DataError, match="already"):
        to_blinded(to_blinded(case_dataset))


def test_mixture_normalization_checked():
    with pytest.raises(DataError, match="sum"):
        mixture_from_masses({Placebo(): 0.5, Active("Abrocitinib", 1): 0.4})


def test_validate_clean(case_dataset):
    assert validate(case_dataset) == []
    assert validate(to_blinded(case_dataset)) == []


def test_validate_flags_bad_exposure(case_dataset):
    import dataclasses
    bad_unit = dataclasses.replace(case_dataset.units[0], t=0.0)
    ds = dataclasses.replace(case_dataset,
                             units=(bad_unit,) + case_dataset.units[1:])
    report = validate(ds)
    assert any("exposure" in v.message and v.field == "t" for v in report)


def test_validate_flags_unnormalized_mixture(case_dataset):
    import dataclasses
    bad = BlindedMixture(((Placebo(), 0.5), (Active("Abrocitinib", 1), 0.4)))
    blinded = to_blinded(case_dataset)
    unit = blinded.units[0]
    cov = dict(unit.covariates)
    cov["Intervention"] = bad
    ds = dataclasses.replace(
        blinded, units=(dataclasses.replace(unit, covariates=cov),) + blinded.units[1:])
    report = validate(ds)
    assert any("not normalized" in v.message for v in report)


def test_schema_requires_single_intervention():
    with pytest.raises(SchemaError, match="intervention"):
        CovariateSchema((CovariateEntry("x", "binary", 1.0),))


def test_schema_rejects_bad_ladder():
    with pytest.raises(SchemaError, match="increasing"):
        CovariateEntry("Intervention", "intervention", 1.0,
                       dose_ladders={"d": (10.0, 10.0)})


def test_schema_config_unknown_covariate(case_csv, schema_json):
    doc = json.loads(schema_json)
    doc["covariates"].append({"name": "Mystery", "kind": "binary", "weight": 1.0})
    with pytest.raises(SchemaError, match="Mystery"):
        parse_dataset(case_csv, json.dumps(doc))


def test_resolution_assignment(case_dataset):
    assert all(u.resolution == "covariate-summary" for u in case_dataset.units)
    blinded = to_blinded(case_dataset)
    assert blinded.units[0].resolution == "study-level"
