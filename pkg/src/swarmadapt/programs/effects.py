from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class DefendEffects:
    """What the Defend pipeline asks every receiver to do with neighbor reports.

    ``quarantine`` maps an aircraft id to the first frame at which its
    reports are trusted again.
    """

    outlier_z: float | None = None
    trust_decay: float | None = None
    weight_noise_sigma: float | None = None
    quarantine: dict[int, int] = field(default_factory=dict)

    def quarantined(self, frame: int) -> set[int]:
        return {i for i, until in self.quarantine.items() if frame < until}

    @property
    def is_noop(self) -> bool:
        return (
            self.outlier_z is None
            and not self.trust_decay
            and not self.weight_noise_sigma
            and not self.quarantine
        )


NO_DEFENSE = DefendEffects()
