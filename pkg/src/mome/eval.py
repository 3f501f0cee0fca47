"""Dice evaluation at image, task and dataset level; gating diagnostics."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TrainSample
from .errors import ContractError
from .moe import MoME, segment
from .nn import ExpertNetwork, Modality


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p, g = pred.astype(bool), gt.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


@dataclass
class ImageRecord:
    dice: float
    dataset_id: str
    task_id: str
    image_id: str = ""


@dataclass
class EvalReport:
    records: list[ImageRecord]
    image_level: float
    task_level: float
    dataset_level: float
    per_task: dict = field(default_factory=dict)
    per_dataset: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [json.dumps({"level": lvl, "dice": v}) for lvl, v in
               (("image", self.image_level), ("task", self.task_level), ("dataset", self.dataset_level))]
        out += [json.dumps({"task_id": t, "dice": v}) for t, v in self.per_task.items()]
        out += [json.dumps({"dataset_id": d, "dice": v}) for d, v in self.per_dataset.items()]
        return out

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "dataset_id", "task_id", "dice"])
        for r in self.records:
            w.writerow([r.image_id, r.dataset_id, r.task_id, f"{r.dice:.6f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        """``path`` gets the line-delimited summary, ``path.csv`` the per-image table."""
        path = Path(path)
        path.write_text("\n".join(self.lines()) + "\n")
        path.with_name(path.name + ".csv").write_text(self.csv())


def _group_mean(records, key) -> dict[str, float]:
    groups = defaultdict(list)
    for r in records:
        groups[getattr(r, key)].append(r.dice)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def aggregate_report(per_image: Sequence[ImageRecord]) -> EvalReport:
    """Image-level mean plus unweighted means over per-task and per-dataset means."""
    if not per_image:
        raise ContractError("no evaluation records")
    for r in per_image:
        if not r.dataset_id or not r.task_id:
            raise ContractError(f"record {r.image_id!r} lacks dataset_id or task_id")
    per_task = _group_mean(per_image, "task_id")
    per_dataset = _group_mean(per_image, "dataset_id")
    return EvalReport(list(per_image), float(np.mean([r.dice for r in per_image])),
                      float(np.mean(list(per_task.values()))),
                      float(np.mean(list(per_dataset.values()))), per_task, per_dataset)


def predict(model, sample: TrainSample) -> np.ndarray:
    """Full-resolution mask from a MoME model or a single network."""
    with T.no_grad():
        if isinstance(model, MoME):
            level1 = model(sample.volume)[2].levels[0]
        else:
            level1 = model(sample.volume).levels[0]
    return segment(level1)


def evaluate(model, samples: Sequence[TrainSample]) -> EvalReport:
    records = [ImageRecord(dice(predict(model, s), s.label), s.dataset_id, s.task_id, f"{i:05d}")
               for i, s in enumerate(samples)]
    return aggregate_report(records)


# ---------------------------------------------------------------- gating diagnostics

@dataclass
class ActivationProfile:
    """``matrix[m, i]``: mean gate weight of expert ``i`` over images of modality ``modalities[m]``."""
    modalities: list[Modality]
    matrix: np.ndarray
    entropy: np.ndarray
    level: int = 1

    @property
    def num_experts(self) -> int:
        return self.matrix.shape[1]

    def inactive_experts(self) -> list[int]:
        """Experts whose largest mean weight over modalities is under 1/(2N)."""
        thresh = 1.0 / (2 * self.num_experts)
        return [int(i) for i in np.flatnonzero(self.matrix.max(axis=0) < thresh)]

    def matching_is_row_max(self) -> dict[Modality, bool]:
        return {m: int(np.argmax(row)) == int(m) for m, row in zip(self.modalities, self.matrix)}

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["modality"] + [f"expert_{Modality(i).label}" for i in range(self.num_experts)] + ["entropy"])
        for m, row, h in zip(self.modalities, self.matrix, self.entropy):
            w.writerow([m.label] + [f"{v:.6f}" for v in row] + [f"{h:.6f}"])
        return buf.getvalue()


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def profile_from_maps(modalities: Sequence[Modality], maps: Sequence[np.ndarray], level: int = 1) -> ActivationProfile:
    """Build a profile from per-image gate maps ``[N, ...]`` and their modalities."""
    if not maps:
        raise ContractError("no images to profile")
    by_mod = defaultdict(list)
    for m, g in zip(modalities, maps):
        by_mod[Modality(m)].append(g.reshape(g.shape[0], -1).mean(axis=1, dtype=np.float64))
    mods = sorted(by_mod)
    matrix = np.array([np.mean(by_mod[m], axis=0) for m in mods])
    return ActivationProfile(mods, matrix, np.array([entropy(r) for r in matrix]), level)


def activation_profile(model: MoME, samples: Sequence[TrainSample], level: int = 1) -> ActivationProfile:
    """Mean per-voxel gate weight per expert, averaged over the images of each modality."""
    if not samples:
        raise ContractError("activation profile needs a non-empty dataset")
    maps = []
    with T.no_grad():
        for s in samples:
            _, gates, _ = model(s.volume)
            maps.append(gates.levels[level - 1].data)
    return profile_from_maps([s.modality for s in samples], maps, level)


def expert_cross_dice(experts: Sequence[ExpertNetwork], samples: Sequence[TrainSample]) -> np.ndarray:
    """``[modality, expert]`` mean Dice of each expert alone on each modality."""
    out = np.zeros((len(Modality), len(experts)))
    for m in Modality:
        subset = [s for s in samples if s.modality == m]
        for i, e in enumerate(experts):
            if subset:
                out[int(m), i] = np.mean([dice(predict(e, s), s.label) for s in subset])
    return out
