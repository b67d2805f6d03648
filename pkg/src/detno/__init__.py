"""Diffusion-enhanced transformer neural operator for traffic forecasting.

The package covers the full pipeline: LWR/Godunov data generation, window
extraction, the neural operator with its diffusion refiner, training,
autoregressive rollout, and the evaluation suite.
"""

from .lwr import DensityField, LightState, Scenario, SimConfig, sample_scenario, simulate

__all__ = [
    "DensityField",
    "LightState",
    "Scenario",
    "SimConfig",
    "sample_scenario",
    "simulate",
]

__version__ = "0.1.0"
