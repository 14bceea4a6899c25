"""Structure-informed shadow removal: RTV structure extraction, MSFE/MFRA
shadow-aware layers, StructNet / MStructNet models and their training and
evaluation tooling."""

__version__ = "0.1.0"
