"""Offline reproduction of delegation, renewal and shell composition."""

from .experiments import (
    ExperimentReport,
    run_fractal_experiment,
    run_pipelines_experiment,
    run_streaming_experiment,
)
from .library import LibrarySpec, Manifest, StreamSpec, generate_library, stream_segments

__all__ = [
    "ExperimentReport",
    "LibrarySpec",
    "Manifest",
    "StreamSpec",
    "generate_library",
    "run_fractal_experiment",
    "run_pipelines_experiment",
    "run_streaming_experiment",
    "stream_segments",
]
