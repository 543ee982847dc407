"""Run-level measurement containers: operation counters, traces, probes."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class OpCounters:
    """64-bit add/multiply counters, split by computation phase.

    ``transform_*`` covers the feature (affine) transformation; spike-driven
    matmuls count one addition per nonzero-spike contribution and no
    multiplications.  ``aggregate_*`` covers sparse neighborhood aggregation.
    """

    transform_adds: int = 0
    transform_muls: int = 0
    aggregate_adds: int = 0
    aggregate_muls: int = 0

    def reset(self):
        self.transform_adds = 0
        self.transform_muls = 0
        self.aggregate_adds = 0
        self.aggregate_muls = 0

    @property
    def total(self) -> int:
        return (self.transform_adds + self.transform_muls
                + self.aggregate_adds + self.aggregate_muls)


@dataclass
class RunMetrics:
    """Everything a single training/evaluation run records."""

    loss_trace: list = field(default_factory=list)
    val_acc_trace: list = field(default_factory=list)
    test_acc: float = float("nan")
    firing_rate: list = field(default_factory=list)   # per-layer mean spike prob
    counters: OpCounters = field(default_factory=OpCounters)
    layer_feature_stats: list = field(default_factory=list)  # (global, local) per layer
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_summary(self) -> dict:
        return {
            "test_acc": self.test_acc,
            "firing_rates": list(self.firing_rate),
            "add_count": self.counters.transform_adds + self.counters.aggregate_adds,
            "mul_count": self.counters.transform_muls + self.counters.aggregate_muls,
            "wall_time_s": self.wall_time_s,
        }
