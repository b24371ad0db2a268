"""Study/cohort data structures and tabular ingestion.

The analysis operates on *units*: study-by-cohort cells carrying an
adverse-event count ``y``, an exposure time ``t`` and a typed covariate
vector with missingness. A :class:`Dataset` bundles the units with a
:class:`CovariateSchema` describing covariate kinds and relative weights,
and knows which study is the current (possibly blinded) one.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence


COVARIATE_KINDS = (
    "continuous",
    "binary",
    "categorical-proportion",
    "ordinal",
    "composite",
    "intervention",
)

# Canonical column order of the supported tabular format.
CSV_COLUMNS = ("NCT", "Phase", "Condition", "Intervention", "Dose",
               "stgAge", "n", "male", "t", "SAE")

PLACEBO_LABEL = "Placebo"
BLINDED_COHORT_LABEL = "blinded"


class SchemaError(ValueError):
    """Covariate schema is malformed or inconsistent with the data."""


class DataError(ValueError):
    """Tabular input cannot be parsed into a valid dataset."""


# ---------------------------------------------------------------------------
# Intervention coding


@dataclass(frozen=True, order=True)
class Placebo:
    """Control-arm intervention code."""

    def __str__(self) -> str:
        return PLACEBO_LABEL


@dataclass(frozen=True, order=True)
class Active:
    """Active-arm intervention code: a drug plus a 1-based dose level."""

    drug: str
    dose_level: int

    def __str__(self) -> str:
        return f"{self.drug}[{self.dose_level}]"


@dataclass(frozen=True)
class BlindedMixture:
    """Intervention code for a pooled, still-blinded unit.

    Holds a finite distribution over deterministic arm codes; masses are
    nonnegative and sum to one.
    """

    components: tuple[tuple[Placebo | Active, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "components",
                           tuple(sorted(self.components, key=lambda c: _code_sort_key(c[0]))))

    @property
    def support(self) -> tuple[Placebo | Active, ...]:
        return tuple(code for code, _ in self.components)

    def mass(self, code: Placebo | Active) -> float:
        for c, m in self.components:
            if c == code:
                return m
        return 0.0

    def __str__(self) -> str:
        parts = ", ".join(f"{c}:{m:.4g}" for c, m in self.components)
        return f"Mixture({parts})"


InterventionCode = Placebo | Active | BlindedMixture


def _code_sort_key(code: Placebo | Active) -> tuple:
    if isinstance(code, Placebo):
        return (0, "", 0)
    return (1, code.drug, code.dose_level)


def mixture_from_masses(masses: Mapping[Placebo | Active, float]) -> BlindedMixture:
    """Build a mixture code, checking nonnegativity and normalization."""
    total = 0.0
    for code, m in masses.items():
        if isinstance(code, BlindedMixture):
            raise DataError("mixture components must be deterministic arm codes")
        if m < 0:
            raise DataError(f"mixture mass for {code} is negative")
        total += m
    if abs(total - 1.0) > 1e-12:
        raise DataError(f"mixture masses sum to {total!r}, expected 1")
    return BlindedMixture(tuple(masses.items()))


# ---------------------------------------------------------------------------
# Covariate schema


@dataclass(frozen=True)
class CovariateEntry:
    """One covariate: its kind, relative weight and kind-specific params."""

    name: str
    kind: str
    weight: float
    scale: float | None = None              # continuous: similarity length scale
    levels: int | None = None               # ordinal: total number of levels
    dose_ladders: Mapping[str, tuple[float, ...]] | None = None  # intervention

    def __post_init__(self) -> None:
        if self.kind not in COVARIATE_KINDS:
            raise SchemaError(f"unknown covariate kind {self.kind!r} for {self.name!r}")
        if not self.weight > 0:
            raise SchemaError(f"covariate {self.name!r}: weight must be positive")
        if self.kind == "continuous" and (self.scale is None or not self.scale > 0):
            raise SchemaError(f"covariate {self.name!r}: continuous kind needs scale > 0")
        if self.kind == "ordinal" and (self.levels is None or self.levels < 2):
            raise SchemaError(f"covariate {self.name!r}: ordinal kind needs levels >= 2")
        if self.kind == "intervention":
            if not self.dose_ladders:
                raise SchemaError(f"covariate {self.name!r}: intervention kind needs dose ladders")
            for drug, ladder in self.dose_ladders.items():
                if len(ladder) == 0 or any(b <= a for a, b in zip(ladder, ladder[1:])):
                    raise SchemaError(f"dose ladder for {drug!r} must be strictly increasing")


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate declarations used for similarity scoring."""

    entries: tuple[CovariateEntry, ...]

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate covariate names in schema")
        n_int = sum(1 for e in self.entries if e.kind == "intervention")
        if n_int != 1:
            raise SchemaError(f"schema must declare exactly one intervention covariate, got {n_int}")

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name: str) -> CovariateEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    @property
    def intervention_entry(self) -> CovariateEntry:
        return next(e for e in self.entries if e.kind == "intervention")

    def restrict(self, names: Sequence[str]) -> "CovariateSchema":
        """Schema keeping only the named covariates (intervention must stay)."""
        keep = tuple(e for e in self.entries if e.name in set(names))
        return CovariateSchema(keep)

    def reweight(self, weights: Mapping[str, float]) -> "CovariateSchema":
        """Schema with per-covariate weight overrides."""
        out = []
        for e in self.entries:
            if e.name in weights:
                e = replace(e, weight=float(weights[e.name]))
            out.append(e)
        return CovariateSchema(tuple(out))


# ---------------------------------------------------------------------------
# Units and datasets


@dataclass(frozen=True)
class Unit:
    """One experimental unit: a study-by-cohort cell with outcome data.

    ``covariates`` maps covariate name to value; names absent from the map
    are missing for this unit. ``intervention_label`` / ``dose_label`` keep
    the source spelling so a parsed table can be written back verbatim.
    """

    study_id: str
    cohort_label: str
    resolution: str          # patient-level | covariate-summary | study-level
    covariates: Mapping[str, Any]
    y: int
    t: float
    n: int | None = None
    intervention_label: str = ""
    dose_label: str = ""

    @property
    def key(self) -> str:
        return f"{self.study_id}:{self.cohort_label}"

    @property
    def intervention(self) -> InterventionCode | None:
        for v in self.covariates.values():
            if isinstance(v, (Placebo, Active, BlindedMixture)):
                return v
        return None


@dataclass(frozen=True)
class Dataset:
    """Schema, units, and the identity/blinding state of the current study."""

    schema: CovariateSchema
    units: tuple[Unit, ...]
    current_study_id: str
    blinded: bool = False
    nu: BlindedMixture | None = None
    eligibility_names: tuple[str, ...] = ()
    eligibility_weights: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def current_indices(self) -> list[int]:
        return [i for i, u in enumerate(self.units) if u.study_id == self.current_study_id]

    def historical_indices(self) -> list[int]:
        return [i for i, u in enumerate(self.units) if u.study_id != self.current_study_id]

    def treatment_indices(self) -> list[int]:
        """Active-arm units of the current study (unblinded view)."""
        return [i for i in self.current_indices()
                if isinstance(self.units[i].intervention, Active)]

    def control_indices(self) -> list[int]:
        return [i for i in self.current_indices()
                if isinstance(self.units[i].intervention, Placebo)]

    def counts(self) -> "tuple[list[int], list[float]]":
        return [u.y for u in self.units], [u.t for u in self.units]

    def drop_study(self, study_id: str) -> "Dataset":
        kept = tuple(u for u in self.units if u.study_id != study_id)
        return replace(self, units=kept)

    def with_counts(self, y: Sequence[int]) -> "Dataset":
        if len(y) != self.n_units:
            raise DataError("count vector length does not match unit count")
        new_units = tuple(replace(u, y=int(v)) for u, v in zip(self.units, y))
        return replace(self, units=new_units)


# ---------------------------------------------------------------------------
# Schema config parsing


def parse_schema_config(config_text: str) -> tuple[CovariateSchema, dict]:
    """Parse the JSON schema/config document.

    Returns the schema plus a dict of auxiliary settings: ``current_study``,
    ``blinding_nu`` (``"arm-proportions"`` or an explicit list), and the
    eligibility covariate names/weights.
    """
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema config is not valid JSON: {exc}") from exc
    if "covariates" not in doc:
        raise SchemaError("schema config lacks a 'covariates' list")
    entries = []
    for item in doc["covariates"]:
        ladders = item.get("dose_ladders")
        if ladders is not None:
            ladders = {drug: tuple(float(x) for x in lad) for drug, lad in ladders.items()}
        entries.append(CovariateEntry(
            name=item["name"],
            kind=item["kind"],
            weight=float(item["weight"]),
            scale=item.get("scale"),
            levels=item.get("levels"),
            dose_ladders=ladders,
        ))
    schema = CovariateSchema(tuple(entries))
    eligibility = doc.get("eligibility", {})
    settings = {
        "current_study": doc.get("current_study"),
        "blinding_nu": doc.get("blinding", {}).get("nu", "arm-proportions"),
        "eligibility_names": tuple(eligibility.get("covariates", ())),
        "eligibility_weights": dict(eligibility.get("weights", {})),
    }
    return schema, settings


# ---------------------------------------------------------------------------
# CSV ingestion

_DOSE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*mg", re.IGNORECASE)


def parse_dose_label(dose: str) -> float:
    """Milligram value of a dose label; loading regimens map to the loading dose.

    ``"200mg-50mg"`` denotes a loading/maintenance regimen and maps to 200.
    """
    m = _DOSE_RE.match(dose)
    if not m:
        raise DataError(f"cannot parse dose label {dose!r}")
    return float(m.group(1))


def _intervention_code(drug_label: str, dose_label: str,
                       ladders: Mapping[str, tuple[float, ...]]) -> Placebo | Active:
    if drug_label.strip().lower() == PLACEBO_LABEL.lower():
        return Placebo()
    drug = drug_label.strip()
    if drug not in ladders:
        raise DataError(f"unknown drug {drug!r}: no dose ladder declared")
    if not dose_label.strip():
        raise DataError(f"active intervention {drug!r} requires a dose")
    mg = parse_dose_label(dose_label)
    ladder = ladders[drug]
    for level, value in enumerate(ladder, start=1):
        if value == mg:
            return Active(drug, level)
    raise DataError(f"dose {dose_label!r} ({mg:g} mg) is not on the ladder for {drug!r}")


def _split_labels(cell: str) -> frozenset[str]:
    return frozenset(part.strip() for part in cell.split(",") if part.strip())


def _parse_number(cell: str, row_no: int, column: str, caster, minimum=None):
    try:
        value = caster(cell)
    except (TypeError, ValueError):
        raise DataError(f"row {row_no}: column {column!r}: cannot parse {cell!r}") from None
    if minimum is not None and not value >= minimum:
        raise DataError(f"row {row_no}: column {column!r}: value {value!r} out of range")
    return value


def parse_dataset(csv_text: str, schema_config: str) -> Dataset:
    """Ingest the tabular dataset under a JSON schema config.

    One unit per row. The Sex covariate is stored as the proportion
    ``male / n``; the intervention covariate is built from the Intervention
    and Dose columns against the configured dose ladders. The result is an
    unblinded dataset.
    """
    schema, settings = parse_schema_config(schema_config)
    known = {"Intervention", "Condition", "Phase", "Study", "stgAge", "Sex"}
    for entry in schema:
        if entry.name not in known:
            raise SchemaError(
                f"covariate {entry.name!r} cannot be derived from this table format")
    ladders = schema.intervention_entry.dose_ladders

    reader = csv.DictReader(io.StringIO(csv_text))
    header = reader.fieldnames or []
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise DataError(f"missing required column(s): {', '.join(missing)}")

    units: list[Unit] = []
    seen: set[tuple[str, str, str]] = set()
    rows_per_study: dict[str, int] = {}
    for row_no, row in enumerate(reader, start=2):   # 1-based, after header
        study = (row["NCT"] or "").strip()
        if not study:
            raise DataError(f"row {row_no}: column 'NCT': empty study identifier")
        drug_label = (row["Intervention"] or "").strip()
        dose_label = (row["Dose"] or "").strip()
        dup_key = (study, drug_label, dose_label)
        if dup_key in seen:
            raise DataError(f"row {row_no}: duplicate unit {dup_key!r}")
        seen.add(dup_key)

        t = _parse_number(row["t"], row_no, "t", float)
        if not t > 0:
            raise DataError(f"row {row_no}: column 't': exposure must be positive")
        y = _parse_number(row["SAE"], row_no, "SAE", int, minimum=0)
        n_raw = (row["n"] or "").strip()
        n = _parse_number(n_raw, row_no, "n", int, minimum=1) if n_raw else None
        male_raw = (row["male"] or "").strip()
        male = _parse_number(male_raw, row_no, "male", int, minimum=0) if male_raw else None

        code = _intervention_code(drug_label, dose_label, ladders)
        candidates: dict[str, Any] = {"Intervention": code, "Study": study}
        if (row["Condition"] or "").strip():
            candidates["Condition"] = row["Condition"].strip()
        if (row["Phase"] or "").strip():
            candidates["Phase"] = _split_labels(row["Phase"])
        if (row["stgAge"] or "").strip():
            candidates["stgAge"] = _split_labels(row["stgAge"])
        if male is not None and n is not None:
            if male > n:
                raise DataError(f"row {row_no}: column 'male': count exceeds n")
            candidates["Sex"] = male / n
        covariates = {name: candidates[name] for name in schema.names if name in candidates}

        cohort = f"{drug_label} {dose_label}".strip()
        units.append(Unit(
            study_id=study,
            cohort_label=cohort,
            resolution="covariate-summary",
            covariates=covariates,
            y=y,
            t=t,
            n=n,
            intervention_label=drug_label,
            dose_label=dose_label,
        ))
        rows_per_study[study] = rows_per_study.get(study, 0) + 1

    if not units:
        raise DataError("dataset has no rows")
    units = [replace(u, resolution="study-level") if rows_per_study[u.study_id] == 1 else u
             for u in units]

    current = settings["current_study"]
    if current is None:
        raise SchemaError("schema config must name the current study")
    if current not in rows_per_study:
        raise DataError(f"current study {current!r} not present in the table")
    return Dataset(
        schema=schema,
        units=tuple(units),
        current_study_id=current,
        blinded=False,
        eligibility_names=settings["eligibility_names"],
        eligibility_weights=settings["eligibility_weights"],
    )


def _format_number(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def dataset_to_csv(ds: Dataset) -> str:
    """Write an unblinded dataset back to the tabular format (round-trips)."""
    if ds.blinded:
        raise DataError("blinded datasets cannot be written to the tabular format")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for u in ds.units:
        phase = ",".join(sorted(u.covariates["Phase"])) if "Phase" in u.covariates else ""
        age = ",".join(sorted(u.covariates["stgAge"])) if "stgAge" in u.covariates else ""
        cond = u.covariates.get("Condition", "")
        if "Sex" in u.covariates and u.n is not None:
            male = str(round(u.covariates["Sex"] * u.n))
        else:
            male = ""
        writer.writerow([
            u.study_id, phase, cond, u.intervention_label, u.dose_label, age,
            "" if u.n is None else str(u.n), male,
            _format_number(u.t), str(u.y),
        ])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Derived views


def empirical_rates(ds: Dataset) -> dict[str, float]:
    """Observed events per person-day, keyed by ``study:cohort``."""
    return {u.key: u.y / u.t for u in ds.units}


def arm_proportion_mixture(ds: Dataset) -> BlindedMixture:
    """Default blinding mixture: current-study arm sizes as masses."""
    idx = ds.current_indices()
    if any(ds.units[i].n is None for i in idx):
        raise DataError("arm-proportion mixture needs enrolled counts for every current arm")
    total = sum(ds.units[i].n for i in idx)
    masses = {ds.units[i].intervention: ds.units[i].n / total for i in idx}
    return mixture_from_masses(masses)


def to_blinded(ds: Dataset, nu: BlindedMixture | None = None) -> Dataset:
    """Merge the current study's arms into one blinded unit.

    Counts and exposures are summed; the intervention covariate becomes the
    mixture ``nu`` (defaulting to arm-size proportions); other covariates
    keep their value when all arms agree, proportions merge by enrolled-count
    weighting, anything else becomes missing.
    """
    if ds.blinded:
        raise DataError("dataset is already blinded")
    idx = ds.current_indices()
    if not idx:
        raise DataError(f"current study {ds.current_study_id!r} has no units")
    arms = [ds.units[i] for i in idx]
    if nu is None:
        nu = arm_proportion_mixture(ds)
    arm_codes = {u.intervention for u in arms}
    if set(nu.support) != arm_codes:
        raise DataError("mixture support does not match the current study's arms")

    merged_cov: dict[str, Any] = {}
    for entry in ds.schema:
        if entry.kind == "intervention":
            merged_cov[entry.name] = nu
            continue
        values = [u.covariates[entry.name] for u in arms if entry.name in u.covariates]
        if len(values) != len(arms):
            continue
        if entry.kind == "categorical-proportion":
            if any(u.n is None for u in arms):
                continue
            total_n = sum(u.n for u in arms)
            merged_cov[entry.name] = sum(v * u.n for v, u in zip(values, arms)) / total_n
        elif all(v == values[0] for v in values):
            merged_cov[entry.name] = values[0]

    merged = Unit(
        study_id=ds.current_study_id,
        cohort_label=BLINDED_COHORT_LABEL,
        resolution="study-level",
        covariates=merged_cov,
        y=sum(u.y for u in arms),
        t=sum(u.t for u in arms),
        n=sum(u.n for u in arms) if all(u.n is not None for u in arms) else None,
        intervention_label="Blinded",
        dose_label="",
    )
    new_units = []
    inserted = False
    for i, u in enumerate(ds.units):
        if i in idx:
            if not inserted:
                new_units.append(merged)
                inserted = True
            continue
        new_units.append(u)
    return replace(ds, units=tuple(new_units), blinded=True, nu=nu)


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    unit: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.unit}/{self.field}: {self.message}"


def validate(ds: Dataset) -> list[Violation]:
    """Invariant check; an empty report means the dataset is well formed."""
    report: list[Violation] = []

    def bad(unit: str, fld: str, msg: str) -> None:
        report.append(Violation(unit, fld, msg))

    seen_labels: set[tuple[str, str]] = set()
    current_units = 0
    for u in ds.units:
        if not u.t > 0 or math.isnan(u.t):
            bad(u.key, "t", "exposure must be positive")
        if u.y < 0:
            bad(u.key, "y", "event count must be nonnegative")
        if u.n is not None and u.n <= 0:
            bad(u.key, "n", "enrolled count must be positive")
        if u.resolution not in ("patient-level", "covariate-summary", "study-level"):
            bad(u.key, "resolution", f"unknown resolution {u.resolution!r}")
        label_key = (u.study_id, u.cohort_label)
        if label_key in seen_labels:
            bad(u.key, "cohort_label", "duplicate unit label within study")
        seen_labels.add(label_key)
        if u.study_id == ds.current_study_id:
            current_units += 1
        for name, value in u.covariates.items():
            try:
                entry = ds.schema[name]
            except KeyError:
                bad(u.key, name, "covariate not declared in schema")
                continue
            if entry.kind == "categorical-proportion" and not (0.0 <= value <= 1.0):
                bad(u.key, name, f"proportion {value!r} outside [0, 1]")
            if entry.kind == "intervention":
                report.extend(_check_intervention(u.key, name, value, entry))

    if current_units == 0:
        bad("<dataset>", "current_study", f"current study {ds.current_study_id!r} has no units")
    if ds.blinded:
        cur = [ds.units[i] for i in ds.current_indices()]
        if len(cur) != 1:
            bad("<dataset>", "blinded", "blinded dataset must have one current-study unit")
        elif not isinstance(cur[0].intervention, BlindedMixture):
            bad(cur[0].key, "Intervention", "blinded current unit must carry a mixture code")
    return report


def _check_intervention(unit_key: str, name: str, value: Any,
                        entry: CovariateEntry) -> list[Violation]:
    out: list[Violation] = []
    codes: Sequence[tuple[Placebo | Active, float]]
    if isinstance(value, BlindedMixture):
        total = sum(m for _, m in value.components)
        if abs(total - 1.0) > 1e-12:
            out.append(Violation(unit_key, name, "mixture not normalized"))
        if any(m < 0 for _, m in value.components):
            out.append(Violation(unit_key, name, "mixture has negative mass"))
        codes = value.components
    elif isinstance(value, (Placebo, Active)):
        codes = ((value, 1.0),)
    else:
        return [Violation(unit_key, name, f"not an intervention code: {value!r}")]
    for code, _ in codes:
        if isinstance(code, Active):
            ladder = (entry.dose_ladders or {}).get(code.drug)
            if ladder is None:
                out.append(Violation(unit_key, name, f"unknown drug {code.drug!r}"))
            elif not 1 <= code.dose_level <= len(ladder):
                out.append(Violation(unit_key, name,
                                     f"dose level {code.dose_level} off the ladder for {code.drug!r}"))
    return out
