"""Expert pretraining, joint curriculum training and the pooled baseline."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .curriculum import CurriculumSchedule, curriculum_loss
from .data import TrainSample
from .errors import ConfigError, ContractError, DivergenceError
from .loss import deep_supervision_weights, mome_loss, specialisation_loss
from .moe import MoME
from .nn import ExpertNetwork, GatingNetwork, Modality, NUM_MODALITIES, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = 800


@dataclass
class TrainConfig:
    epochs_pretrain: int = 50
    epochs_joint: int = 100
    epochs_baseline: int | None = None      # None: pretrain + joint
    iters_per_epoch: int | None = None      # None: one pass over the data
    lr_pretrain: float = 1e-2
    lr_joint: float = 1e-3
    lr_gate: float | None = None            # None: lr_joint
    momentum: float = 0.9
    weight_decay: float = 3e-5
    poly_exponent: float = 0.9
    grad_clip: float = 12.0
    optimizer: str = "sgd"
    seed: int = 0
    checkpoint_interval: int = 0            # 0: final checkpoint only
    schedule: str = "quadratic"
    random_experts: bool = False
    hierarchical: bool = True
    base: int = 8
    gate_base: int = 8
    levels: int = 3

    def validate(self) -> None:
        counts = {"epochs_pretrain": self.epochs_pretrain, "epochs_joint": self.epochs_joint,
                  "base": self.base, "gate_base": self.gate_base, "levels": self.levels}
        if self.iters_per_epoch is not None:
            counts["iters_per_epoch"] = self.iters_per_epoch
        for name, v in counts.items():
            if v < (0 if name == "epochs_pretrain" else 1):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.lr_pretrain <= 0 or self.lr_joint <= 0 or (self.lr_gate is not None and self.lr_gate <= 0):
            raise ConfigError("learning rates must be positive")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")

    @property
    def gate_lr(self) -> float:
        return self.lr_joint if self.lr_gate is None else self.lr_gate

    @property
    def baseline_epochs(self) -> int:
        return self.epochs_baseline if self.epochs_baseline is not None else self.epochs_pretrain + self.epochs_joint


class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, clip: float | None = None,
                 groups: Sequence[tuple[int, float]] | None = None):
        """``groups``: consecutive (count, lr multiplier) runs over ``params``."""
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay, self.clip = lr, momentum, weight_decay, clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        groups = groups or [(len(self.params), 1.0)]
        if sum(n for n, _ in groups) != len(self.params):
            raise ContractError("parameter groups do not cover the parameter list")
        self.scales = [m for n, m in groups for _ in range(n)]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        for p, g, v, m in zip(self.params, grads, self.velocity, self.scales):
            d = g * np.float32(scale)
            if self.weight_decay:
                d = d + np.float32(self.weight_decay) * p.data
            v *= np.float32(self.momentum)
            v += d
            p.data -= np.float32(self.lr * m) * v
        return norm


def poly_lr(initial: float, epoch: int, total: int, exponent: float = 0.9) -> float:
    return initial * (1.0 - epoch / total) ** exponent


def epoch_order(n: int, iters: int | None, rng: np.random.Generator) -> np.ndarray:
    """Sample indices for one epoch: a permutation, or ``iters`` draws from
    back-to-back permutations."""
    if iters is None:
        return rng.permutation(n)
    reps = -(-iters // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:iters]


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss during {where}")


class JsonLog:
    """Line-delimited JSON training records."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------- single network

def _train_single(net: ExpertNetwork, samples: Sequence[TrainSample], epochs: int, cfg: TrainConfig,
                  rng: np.random.Generator, logger: JsonLog, phase: str,
                  ckpt_path=None) -> list[dict]:
    k = deep_supervision_weights(net.levels)
    opt = SGD(net.parameters(), cfg.lr_pretrain, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.lr = poly_lr(cfg.lr_pretrain, epoch, epochs, cfg.poly_exponent)
        losses = []
        for i in epoch_order(len(samples), cfg.iters_per_epoch, rng):
            s = samples[i]
            T.reset_tape()
            opt.zero_grad()
            loss = specialisation_loss(net(s.volume), s.label, k)
            value = float(loss.data)
            _check_finite(value, phase)
            T.backward(loss)
            opt.step()
            losses.append(value)
        logger.write({"phase": phase, "epoch": epoch, "lr": opt.lr, "loss": float(np.mean(losses)),
                      "wall_time": time.perf_counter() - t0})
        if ckpt_path is not None and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(net, ckpt_path)
    if ckpt_path is not None:
        save_checkpoint(net, ckpt_path)
    return logger.records


def pretrain_expert(expert: ExpertNetwork, samples: Sequence[TrainSample], cfg: TrainConfig,
                    ckpt_path=None, log_path=None) -> list[dict]:
    """Train one expert on images of its own modality with the deep-supervised loss."""
    cfg.validate()
    if not samples:
        raise ConfigError("pretraining dataset is empty")
    wrong = [s.modality.label for s in samples if s.modality != expert.modality]
    if wrong:
        raise ContractError(f"expert for {expert.modality.label} given {len(wrong)} "
                            f"samples of other modalities (e.g. {wrong[0]})")
    rng = np.random.default_rng([cfg.seed, 1, int(expert.modality)])
    log.info("pretraining %s expert for %d epochs", expert.modality.label, cfg.epochs_pretrain)
    return _train_single(expert, samples, cfg.epochs_pretrain, cfg, rng, JsonLog(log_path),
                         f"pretrain-{expert.modality.label}", ckpt_path)


def train_baseline(net: ExpertNetwork, samples: Sequence[TrainSample], cfg: TrainConfig,
                   ckpt_path=None, log_path=None) -> list[dict]:
    """Single network on the pooled multi-modality training data."""
    cfg.validate()
    if not samples:
        raise ConfigError("baseline dataset is empty")
    rng = np.random.default_rng([cfg.seed, 3])
    return _train_single(net, samples, cfg.baseline_epochs, cfg, rng, JsonLog(log_path),
                         "baseline", ckpt_path)


def matched_baseline(target_params: int, levels: int = 3, seed: int = 0) -> ExpertNetwork:
    """Pooled single network whose width brings its parameter count closest to ``target_params``."""
    best = None
    for base in range(1, 65):
        n = ExpertNetwork(None, base, levels, seed=seed).num_parameters()
        if best is None or abs(n - target_params) < abs(best[1] - target_params):
            best = (base, n)
        if n > target_params:
            break
    return ExpertNetwork(None, best[0], levels, seed=seed)


# ---------------------------------------------------------------- joint phase

def build_mome(cfg: TrainConfig, experts: Sequence[ExpertNetwork] | None = None) -> MoME:
    """Gate plus experts; experts are freshly initialised when not given."""
    if experts is None:
        experts = [ExpertNetwork(m, cfg.base, cfg.levels, seed=cfg.seed * 100 + int(m)) for m in Modality]
    gate = GatingNetwork(len(experts), experts[0].base, cfg.gate_base, cfg.levels,
                         seed=cfg.seed * 100 + 99, hierarchical=cfg.hierarchical)
    return MoME(experts, gate)


def joint_step(model: MoME, sample: TrainSample, f: float, k) -> tuple[float, float]:
    """Forward + backward of the curriculum loss for one sample.

    Gradients are left in the parameters' ``.grad``; returns (L_cl, L_MoME).
    """
    outs, _, agg = model(sample.volume)
    l_mome = mome_loss(agg, sample.label, k)
    j = int(sample.modality)
    spec = [None] * len(model.experts)
    if f > 0:
        spec[j] = specialisation_loss(outs[j], sample.label, k)
    loss = curriculum_loss(sample.modality, spec, l_mome, f)
    values = float(loss.data), float(l_mome.data)
    T.backward(loss)
    return values


def train_joint(model: MoME, samples: Sequence[TrainSample], cfg: TrainConfig,
                log_path=None, ckpt_dir=None,
                on_epoch: Callable[[int, MoME], None] | None = None) -> list[dict]:
    """Gate training with expert fine-tuning under the curriculum loss.

    The curriculum weight is computed once per epoch. Expert parameters are
    updated with ``cfg.lr_joint``, gate parameters with ``cfg.gate_lr``; both
    follow the poly decay.
    """
    cfg.validate()
    if not samples:
        raise ConfigError("joint training dataset is empty")
    if len(model.experts) != NUM_MODALITIES:
        raise ContractError("one expert per modality is required")
    for i, e in enumerate(model.experts):
        if e.modality is not None and int(e.modality) != i:
            raise ContractError(f"expert {i} is specialised on {e.modality.label}; order experts by modality code")
    schedule = CurriculumSchedule(cfg.epochs_joint, 0, cfg.schedule)
    k = deep_supervision_weights(cfg.levels)
    rng = np.random.default_rng([cfg.seed, 2])
    expert_params = [p for e in model.experts for p in e.parameters()]
    opt = SGD(expert_params + model.gate.parameters(), cfg.lr_joint, cfg.momentum, cfg.weight_decay,
              cfg.grad_clip, groups=[(len(expert_params), 1.0), (len(model.gate.parameters()), cfg.gate_lr / cfg.lr_joint)])
    logger = JsonLog(log_path)
    for epoch in range(cfg.epochs_joint):
        t0 = time.perf_counter()
        f = schedule.f(epoch)
        opt.lr = poly_lr(cfg.lr_joint, epoch, cfg.epochs_joint, cfg.poly_exponent)
        cl, mm = [], []
        for i in epoch_order(len(samples), cfg.iters_per_epoch, rng):
            T.reset_tape()
            opt.zero_grad()
            l_cl, l_mome = joint_step(model, samples[i], f, k)
            _check_finite(l_cl, "joint training")
            opt.step()
            cl.append(l_cl)
            mm.append(l_mome)
        logger.write({"phase": "joint", "epoch": epoch, "f": f, "lr": opt.lr,
                      "lr_gate": opt.lr * cfg.gate_lr / cfg.lr_joint,
                      "loss_cl": float(np.mean(cl)), "loss_mome": float(np.mean(mm)),
                      "wall_time": time.perf_counter() - t0})
        log.info("joint epoch %d f=%.4f L_cl=%.4f L_MoME=%.4f", epoch, f, np.mean(cl), np.mean(mm))
        if ckpt_dir is not None and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_model(model, ckpt_dir)
        if on_epoch is not None:
            on_epoch(epoch, model)
    if ckpt_dir is not None:
        save_model(model, ckpt_dir)
    return logger.records


def save_model(model: MoME, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(model.experts):
        save_checkpoint(e, d / f"expert_{Modality(i).label}.ckpt")
    save_checkpoint(model.gate, d / "gate.ckpt")


def load_model(directory) -> MoME:
    from .nn import load_checkpoint

    d = Path(directory)
    experts = [load_checkpoint(d / f"expert_{m.label}.ckpt") for m in Modality]
    return MoME(experts, load_checkpoint(d / "gate.ckpt"))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
