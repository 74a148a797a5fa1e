"""Link-level simulator and detector benchmark for RIS-assisted MISO downlinks."""

__version__ = "0.1.0"
