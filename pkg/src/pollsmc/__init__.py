"""Scenario and sensitivity analysis for poll-aggregation forecasts.

Fit the state-space model once, then traverse families of perturbed
posteriors with a sequential Monte Carlo sampler instead of refitting.
"""

__version__ = "0.1.0"
