"""SAISA / NAAViT desk-scale engine and analytical inference-cost model."""

__version__ = "0.1.0"
