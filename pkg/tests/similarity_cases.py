"""Hand-derived similarity cases shared by the unit and acceptance suites.

Every expected value is independent arithmetic (fractions and exp calls
written out), not output captured from the implementation.
"""

import math

from aemonitor.data_model import Active, BlindedMixture, Placebo

# dose ladders used throughout: drug A has 4 levels, drug R has 5
LADDERS = {
    "Abrocitinib": (10.0, 30.0, 100.0, 200.0),
    "Ritlecitinib": (10.0, 30.0, 50.0, 100.0, 200.0),
}

P = Placebo()
A1, A2, A3, A4 = (Active("Abrocitinib", h) for h in (1, 2, 3, 4))
R1, R2, R3, R5 = (Active("Ritlecitinib", h) for h in (1, 2, 3, 5))

# case-study blinding mixture: arm sizes 78 / 158 / 155 over placebo and
# the two treatment arms
_N = 391.0
MIX_CASE = BlindedMixture(((P, 78 / _N), (A3, 158 / _N), (A4, 155 / _N)))
MIX_HALF_P_A4 = BlindedMixture(((P, 0.5), (A4, 0.5)))
MIX_HALF_P_A2 = BlindedMixture(((P, 0.5), (A2, 0.5)))

# (label, kind, x, x_other, params, expected)
COMPONENT_CASES = [
    ("continuous identity", "continuous", 5.0, 5.0, {"scale": 2.0}, 1.0),
    ("continuous gap 2 scale 2", "continuous", 0.0, 2.0, {"scale": 2.0}, math.exp(-1.0)),
    ("continuous gap 3 scale 3", "continuous", 1.0, 4.0, {"scale": 3.0}, math.exp(-1.0)),
    ("continuous gap 1 scale 2", "continuous", 0.0, 1.0, {"scale": 2.0}, math.exp(-0.25)),
    ("binary equal", "binary", "Atopic Dermatitis", "Atopic Dermatitis", {}, 1.0),
    ("binary unequal", "binary", "Atopic Dermatitis", "Alopecia Areata", {}, 0.0),
    ("binary study equal", "binary", "NCT03575871", "NCT03575871", {}, 1.0),
    ("binary study unequal", "binary", "NCT03575871", "NCT02780167", {}, 0.0),
    ("proportion equal", "categorical-proportion", 0.5, 0.5, {}, 1.0),
    ("proportion case-study pair", "categorical-proportion",
     47 / 78, 94 / 158, {}, 1.0 - abs(47 / 78 - 94 / 158)),
    ("proportion extremes", "categorical-proportion", 0.0, 1.0, {}, 0.0),
    ("proportion half apart", "categorical-proportion", 0.25, 0.75, {}, 0.5),
    ("ordinal equal", "ordinal", 3, 3, {"levels": 5}, 1.0),
    ("ordinal span", "ordinal", 1, 5, {"levels": 5}, 1.0 - 4 / 5),
    ("ordinal adjacent", "ordinal", 2, 3, {"levels": 4}, 1.0 - 1 / 4),
    ("composite partial phases", "composite",
     frozenset({"phase 2", "phase 3"}), frozenset({"phase 2"}), {}, 0.5),
    ("composite equal", "composite",
     frozenset({"phase 2"}), frozenset({"phase 2"}), {}, 1.0),
    ("composite disjoint", "composite",
     frozenset({"phase 2"}), frozenset({"phase 3"}), {}, 0.0),
    ("composite partial ages", "composite",
     frozenset({"CHILD", "ADULT", "OLDER_ADULT"}),
     frozenset({"ADULT", "OLDER_ADULT"}), {}, 0.5),
    ("composite order-free equality", "composite",
     frozenset({"A", "B"}), frozenset({"B", "A"}), {}, 1.0),
]

# (label, code, code_other, expected)
INTERVENTION_CASES = [
    ("placebo pair", P, P, 1.0),
    ("placebo vs active", P, A3, 0.0),
    ("same drug one level apart (H=4)", A3, A4, 1.0 - 1 / 4),
    ("same drug three levels apart", A1, A4, 1.0 - 3 / 4),
    ("same drug same level", A2, A2, 1.0),
    ("different drugs", A3, R3, 0.0),
    ("same drug four levels apart (H=5)", R1, R5, 1.0 - 4 / 5),
    ("loading-dose arms both at top level", R5, R5, 1.0),
    ("same drug one level apart (H=5)", R2, R3, 1.0 - 1 / 5),
    ("active vs placebo (swapped)", A3, P, 0.0),
    ("case mixture vs placebo", MIX_CASE, P, 78 / 391),
    ("case mixture vs treated level 3",
     MIX_CASE, A3, (158 + 155 * 0.75) / 391),
    ("case mixture vs treated level 4",
     MIX_CASE, A4, (158 * 0.75 + 155) / 391),
    ("case mixture vs other drug", MIX_CASE, R3, 0.0),
    ("half mixture vs placebo", MIX_HALF_P_A4, P, 0.5),
    ("two mixtures", MIX_HALF_P_A4, MIX_HALF_P_A2,
     0.25 * 1.0 + 0.25 * 0.0 + 0.25 * 0.0 + 0.25 * (1.0 - 2 / 4)),
    ("case mixture vs itself",
     MIX_CASE, MIX_CASE,
     (78 ** 2 + 158 ** 2 + 155 ** 2 + 2 * 0.75 * 158 * 155) / 391 ** 2),
]

# (label, cov_u, cov_v, weights, expected) evaluated with a schema whose
# entries are: intervention (weight 10) and five matched binaries
PAIRWISE_CASES = [
    ("weighted mix of six covariates",
     {"Intervention": A3, "c1": "x", "c2": "x", "c3": "x", "c4": "x", "c5": "x"},
     {"Intervention": A4, "c1": "x", "c2": "x", "c3": "x", "c4": "x", "c5": "x"},
     {"Intervention": 10.0, "c1": 5.0, "c2": 4.0, "c3": 4.0, "c4": 2.0, "c5": 2.0},
     (10.0 * 0.75 + 17.0) / 27.0),
    ("identical vectors",
     {"Intervention": A2, "c1": "x", "c2": "y", "c3": "z", "c4": "w", "c5": "v"},
     {"Intervention": A2, "c1": "x", "c2": "y", "c3": "z", "c4": "w", "c5": "v"},
     {"Intervention": 10.0, "c1": 5.0, "c2": 4.0, "c3": 4.0, "c4": 2.0, "c5": 2.0},
     1.0),
    ("only two covariates shared",
     {"c1": "atopic", "sex": 0.6},
     {"c1": "atopic", "sex": 0.7},
     {"c1": 5.0, "sex": 2.0},
     (5.0 * 1.0 + 2.0 * (1.0 - abs(0.6 - 0.7))) / 7.0),
]

TOTAL_CASES = len(COMPONENT_CASES) + len(INTERVENTION_CASES) + len(PAIRWISE_CASES)
