"""Universal behavioral profiles from e-commerce event logs."""

__version__ = "0.1.0"
