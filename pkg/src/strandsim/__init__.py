"""Single-molecule reaction-diffusion simulation with dynamic embedded curves."""

__version__ = "0.1.0"
