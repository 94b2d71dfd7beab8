"""Reconcile heterogeneous wind-power scenario forecasts, offer them jointly
in a day-ahead market and share the imbalance cost through LP duals."""

__version__ = "0.1.0"
