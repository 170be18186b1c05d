"""Cost model and instrumentation for the expansion pipeline.

The per-point counts are the analytic budget of the reference algorithm
(box lookup, local offset, monomial table, contraction), not a measurement
of what numpy executes; the translation counts assume dense P x P matrix
products over every grid cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .kernel import level_resolution


def p2m_flops(n_sources: int, rho: int, p: int) -> int:
    """Per-source budget: 9 (box find) + 3 (offset) + 6*rho (monomial
    powers) + 2P (scale and scatter-add)."""
    return n_sources * (9 + 3 + 6 * rho + 2 * p)


def l2p_flops(n_targets: int, rho: int, p: int) -> int:
    """Per-target budget: 9 + 3 + 6*rho + 4P (gather, multiply, reduce)."""
    return n_targets * (9 + 3 + 6 * rho + 4 * p)


def translate_flops(coarse_res: int, p: int) -> int:
    """One M2M or L2L sweep: P^2 * 8 * 2 per coarse cell."""
    return coarse_res ** 3 * p * p * 8 * 2


def grid_memory(level: int, rho_count: int, channels: int) -> int:
    """Number of stored coefficients in one level's grid."""
    return level_resolution(level) ** 3 * rho_count * channels


@dataclass
class FlopCounter:
    """Running per-stage floating point operation tallies."""

    stages: dict = field(default_factory=dict)

    def add(self, stage: str, count: int) -> None:
        self.stages[stage] = self.stages.get(stage, 0) + int(count)

    def total(self) -> int:
        return sum(self.stages.values())

    def reset(self) -> None:
        self.stages.clear()
