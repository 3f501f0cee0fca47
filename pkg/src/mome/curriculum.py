"""Epoch-dependent blend of specialisation and collaboration losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from . import tensor as T
from .errors import ContractError
from .nn import Modality


def quadratic(epoch: int, total: int) -> float:
    return (1.0 - epoch / total) ** 2


def linear(epoch: int, total: int) -> float:
    return 1.0 - epoch / total


def off(epoch: int, total: int) -> float:
    return 0.0


# "off" trains on the aggregate loss alone (curriculum ablation)
SCHEDULES: dict[str, Callable[[int, int], float]] = {
    "quadratic": quadratic,
    "linear": linear,
    "off": off,
}


@dataclass
class CurriculumSchedule:
    epoch_total: int
    epoch_current: int = 0
    kind: str = "quadratic"

    def __post_init__(self):
        if self.epoch_total <= 0:
            raise ContractError(f"epoch_total must be positive, got {self.epoch_total}")
        if self.kind not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.kind!r}; choose from {sorted(SCHEDULES)}")

    def f(self, epoch: int | None = None) -> float:
        epoch = self.epoch_current if epoch is None else epoch
        if not 0 <= epoch <= self.epoch_total:
            raise ContractError(f"epoch {epoch} outside [0, {self.epoch_total}]")
        return SCHEDULES[self.kind](epoch, self.epoch_total)


def f_epoch(schedule: CurriculumSchedule | int, epoch_total: int | None = None) -> float:
    """Specialisation weight ``(1 - current/total)^2``.

    Accepts a schedule or ``(epoch_current, epoch_total)``.
    """
    if not isinstance(schedule, CurriculumSchedule):
        schedule = CurriculumSchedule(epoch_total, schedule)
    return schedule.f()


def curriculum_loss(x_modality: Modality, spec_losses: Sequence, mome, f: float):
    """``f * L_j + (1 - f) * L_MoME`` with ``j`` the expert of the input's modality.

    Entries of ``spec_losses`` for other experts are never read and may be None.
    Terms with zero weight are dropped, so the result equals the surviving
    loss exactly at ``f`` in {0, 1}.
    """
    if not 0.0 <= f <= 1.0:
        raise ContractError(f"curriculum weight {f} outside [0, 1]")
    j = int(Modality(x_modality))
    if len(spec_losses) <= j:
        raise ContractError(f"{len(spec_losses)} specialisation losses, need index {j}")
    spec = spec_losses[j]
    if f == 1.0:
        return spec
    if f == 0.0:
        return mome
    return T.add(T.mul(spec, f), T.mul(mome, 1.0 - f)) if isinstance(spec, T.Tensor) \
        else f * spec + (1.0 - f) * mome
