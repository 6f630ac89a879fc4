"""CAN bus false-data-injection toolkit.

Decode monitored CAN signals, synthesize labeled 3-sigma injection attacks,
train an LSTM detector from scratch, and check the end-to-end latency budget
in a deterministic network simulation.
"""

__version__ = "0.1.0"

from .codec import (
    RawFrame,
    SignalCatalog,
    SignalSpec,
    Trace,
    default_catalog,
    parse_log,
    write_log,
)

__all__ = [
    "RawFrame",
    "SignalCatalog",
    "SignalSpec",
    "Trace",
    "default_catalog",
    "parse_log",
    "write_log",
    "__version__",
]
