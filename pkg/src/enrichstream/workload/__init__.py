from .driver import DriveError, DriveReport, drive
from .generator import (
    DEFAULT_ATTRIBUTES,
    AttributeSpec,
    FleetConfig,
    Trace,
    TraceEvent,
    count_inversions,
    generate_trace,
    out_of_order_fraction,
)
from .rng import Xoshiro256, splitmix64
from .tracefile import read_trace, write_trace

__all__ = [
    "DEFAULT_ATTRIBUTES",
    "AttributeSpec",
    "DriveError",
    "DriveReport",
    "FleetConfig",
    "Trace",
    "TraceEvent",
    "Xoshiro256",
    "count_inversions",
    "drive",
    "generate_trace",
    "out_of_order_fraction",
    "read_trace",
    "splitmix64",
    "write_trace",
]
