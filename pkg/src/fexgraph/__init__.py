"""Feature extraction engine compiling user-behavior features into a fused operator graph."""

from .event_log import BehaviorEvent, EventLog, TimeWindow
from .executor import Engine, ExtractionResult, Mode, OpStats, execute
from .feature_spec import CompFunc, CompKind, FeatureSpec, ModelSpec, normalize, parse_model_spec
from .graph import build_naive_graph, identify_redundancy
from .optimizer import dump_graph, optimize
from .bench import run_benchmark, run_scenario
from .workload import bundled_model, bundled_scenario, build_log, generate_model_spec, generate_records

__all__ = [
    "BehaviorEvent",
    "EventLog",
    "TimeWindow",
    "Engine",
    "ExtractionResult",
    "Mode",
    "OpStats",
    "execute",
    "CompFunc",
    "CompKind",
    "FeatureSpec",
    "ModelSpec",
    "normalize",
    "parse_model_spec",
    "build_naive_graph",
    "identify_redundancy",
    "dump_graph",
    "optimize",
    "run_benchmark",
    "run_scenario",
    "bundled_model",
    "bundled_scenario",
    "build_log",
    "generate_model_spec",
    "generate_records",
]

__version__ = "0.1.0"
