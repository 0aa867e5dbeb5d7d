"""trajlab: component-level trajectory tokenization, masked pre-training and
downstream control evaluation at desk scale."""

__version__ = "0.1.0"
