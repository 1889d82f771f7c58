"""Python bindings for the hierdoc core."""

import json

from ._hierdoc import (
    PlateauSchedule,
    aggregate_average,
    aggregate_most_frequent,
    count_flops,
    evaluate_accuracy,
    git_blob_hash,
    plan_segments,
    run_cli,
    segment_count,
)
from ._hierdoc import generate_task as _generate_task


def generate_task(**spec):
    """Synthetic corpus for a task spec given as keyword arguments."""
    return _generate_task(json.dumps(spec))


__all__ = [
    "PlateauSchedule",
    "aggregate_average",
    "aggregate_most_frequent",
    "count_flops",
    "evaluate_accuracy",
    "generate_task",
    "git_blob_hash",
    "plan_segments",
    "run_cli",
    "segment_count",
]
