"""Online class-incremental learning with replay, EnMix and AdpMix."""

__version__ = "0.1.0"
