"""Fine-grained urban air-quality forecasting on a city grid."""

__version__ = "0.1.0"
