"""Hard-sphere fluctuation laboratory: equilibrium sampling, event-driven
dynamics, fluctuation-field statistics and the linearized Boltzmann model."""

__version__ = "0.1.0"
