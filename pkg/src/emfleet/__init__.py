"""Fleet-level ECOD scoring of SSD error-management telemetry."""

__version__ = "0.1.0"
