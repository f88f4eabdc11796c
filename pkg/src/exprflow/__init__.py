"""Identity- and expression-conditioned rectified-flow transformer on synthetic faces."""

__version__ = "0.1.0"
