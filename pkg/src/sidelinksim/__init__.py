"""Link-level simulator for the Rel-14 LTE-V sidelink air interface."""

__version__ = "0.1.0"
