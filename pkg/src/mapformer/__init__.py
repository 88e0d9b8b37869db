"""Path-integrating rotary transformers, their baselines and SSM counterparts, with synthetic tasks and probes."""

__version__ = "0.1.0"
