"""twin-trust: machine-to-machine trust building from Digital Twin exchange."""

__version__ = "0.1.0"
