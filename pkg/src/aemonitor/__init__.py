"""Aggregate adverse-event rate monitoring across clinical trials.

Covariate-dependent partition modelling of per-unit event rates, decision
probabilities for unblinding and safety reporting, two baseline models,
and a simulation harness for operating characteristics and threshold
calibration.
"""

__version__ = "0.1.0"
