"""Expert encoder-decoders, the hierarchical gating network and checkpoints.

Both network kinds share one U-Net style backbone: ``levels`` resolution
stages, each encoder stage two conv-instance-norm-leaky-ReLU blocks (the
first strided from stage 2 on), and a decoder that upsamples by nearest
neighbour with a 1x1x1 channel-reducing conv, concatenates the skip
connection and applies a 3x3x3 block.
Every decoder level (and the bottleneck) has a 1x1x1 head, so a network
emits one output per resolution level, full resolution first.
The gating network drops the instance norm (see ``GatingNetwork``).
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import BadMagicError, ContractError, DimensionError, TruncatedFileError, VersionMismatchError
from .tensor import Tensor

LEAKY_SLOPE = 0.01


class Modality(enum.IntEnum):
    T1 = 0
    T2 = 1
    T1CE = 2
    FLAIR = 3
    DWI = 4

    @property
    def label(self) -> str:
        return "T1ce" if self is Modality.T1CE else self.name

    @classmethod
    def parse(cls, text: str) -> "Modality":
        for m in cls:
            if text.strip().lower() in (m.name.lower(), m.label.lower()):
                return m
        raise ContractError(f"unknown modality {text!r}; expected one of {[m.label for m in cls]}")


NUM_MODALITIES = len(Modality)


# ---------------------------------------------------------------- modules

class Module:
    """Container that discovers parameters held in attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, zero: bool = False):
        self.stride = stride
        fan_in = cin * k ** 3
        if zero or rng is None:
            w = np.zeros((cout, cin, k, k, k))
        else:
            # He-normal for leaky ReLU
            std = np.sqrt(2.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))
            w = rng.standard_normal((cout, cin, k, k, k)) * std
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride)


class ConvBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, rng=None, norm: bool = True):
        self.conv = Conv3d(cin, cout, 3, stride, rng)
        self.norm = norm

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        return T.leaky_relu(T.instance_norm(h) if self.norm else h, LEAKY_SLOPE)


class UNet3D(Module):
    def __init__(self, in_channels: int, out_channels: int, base: int = 8, levels: int = 3,
                 rng: np.random.Generator | None = None, zero_heads: bool = False, norm: bool = True):
        if levels < 1:
            raise ContractError("levels must be >= 1")
        widths = [base * 2 ** i for i in range(levels)]
        self.in_channels, self.out_channels = in_channels, out_channels
        self.base, self.levels = base, levels
        self.encoder = []
        for i, c in enumerate(widths):
            cin = in_channels if i == 0 else widths[i - 1]
            self.encoder.append([ConvBlock(cin, c, 1 if i == 0 else 2, rng, norm),
                                 ConvBlock(c, c, 1, rng, norm)])
        self.decoder = []
        for i in range(levels - 1):
            self.decoder.append([Conv3d(widths[i + 1], widths[i], 1, 1, rng),
                                 ConvBlock(2 * widths[i], widths[i], 1, rng, norm)])
        self.heads = [Conv3d(c, out_channels, 1, 1, rng, zero=zero_heads) for c in widths]

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise DimensionError(f"expected a [C, D, H, W] input, got shape {x.shape}")
        if x.shape[0] != self.in_channels:
            raise DimensionError(f"channel axis: expected {self.in_channels}, got {x.shape[0]}")
        bad = [n for n in x.shape[1:] if n % self.divisor]
        if bad:
            raise DimensionError(
                f"spatial dims {x.shape[1:]} must each be divisible by {self.divisor} "
                f"(2^(L-1) for L={self.levels} levels)")

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Return per-level head outputs (full resolution first) and the
        first encoder stage's features."""
        self.check_input(x)
        skips = []
        h = x
        for a, b in self.encoder:
            h = b(a(h))
            skips.append(h)
        outs = [None] * self.levels
        outs[-1] = self.heads[-1](h)
        for i in range(self.levels - 2, -1, -1):
            up, fuse = self.decoder[i]
            # a 1x1x1 conv commutes with nearest upsampling; running it first is 8x cheaper
            h = T.upsample_nearest(up(h), 2)
            h = fuse(T.concat([h, skips[i]], axis=0))
            outs[i] = self.heads[i](h)
        return outs, skips[0]


# ---------------------------------------------------------------- outputs

@dataclass
class MultiResLogits:
    levels: list[Tensor]
    shallow: Tensor | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.levels)


@dataclass
class GatingMaps:
    levels: list[Tensor]

    def __len__(self):
        return len(self.levels)


def as_input(x) -> Tensor:
    """Volume, ``[D,H,W]`` array or ``[1,D,H,W]`` tensor -> single-channel tensor."""
    if isinstance(x, Tensor):
        return x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


# ---------------------------------------------------------------- networks

class ExpertNetwork(Module):
    """Encoder-decoder segmenting one modality, with deep-supervision heads."""

    def __init__(self, modality: Modality | None, base: int = 8, levels: int = 3,
                 num_classes: int = 2, seed: int = 0, in_channels: int = 1):
        self.modality = None if modality is None else Modality(modality)
        self.net = UNet3D(in_channels, num_classes, base, levels, np.random.default_rng(seed))

    @property
    def levels(self) -> int:
        return self.net.levels

    @property
    def base(self) -> int:
        return self.net.base

    def __call__(self, x) -> MultiResLogits:
        return expert_forward(self, x)


def expert_forward(expert: ExpertNetwork, x) -> MultiResLogits:
    outs, shallow = expert.net.forward(as_input(x))
    return MultiResLogits(outs, shallow)


class GatingNetwork(Module):
    """Per-voxel, per-level weights over experts.

    Input is the raw image concatenated channel-wise with every expert's
    first-stage features. With ``hierarchical=False`` only the full-resolution
    map is learned and coarser levels are uniform.
    """

    def __init__(self, num_experts: int = NUM_MODALITIES, expert_width: int = 8, base: int = 8,
                 levels: int = 3, seed: int = 0, hierarchical: bool = True):
        self.num_experts = num_experts
        self.expert_width = expert_width
        self.hierarchical = hierarchical
        # no instance norm: it would remove the image-level statistics that
        # tell modalities apart, leaving the gate a per-voxel decision only
        self.net = UNet3D(1 + num_experts * expert_width, num_experts, base, levels,
                          np.random.default_rng(seed), zero_heads=True, norm=False)

    @property
    def levels(self) -> int:
        return self.net.levels

    def __call__(self, x, shallow_feats: Sequence[Tensor]) -> GatingMaps:
        return gating_forward(self, x, shallow_feats)


def gating_forward(gate: GatingNetwork, x, shallow_feats: Sequence[Tensor]) -> GatingMaps:
    if len(shallow_feats) != gate.num_experts:
        raise ContractError(f"gating expects {gate.num_experts} shallow feature maps, got {len(shallow_feats)}")
    x = as_input(x)
    for i, f in enumerate(shallow_feats):
        if f.shape[1:] != x.shape[1:]:
            raise DimensionError(f"shallow features of expert {i} have spatial dims {f.shape[1:]}, "
                                 f"image has {x.shape[1:]}")
    logits, _ = gate.net.forward(T.concat([x, *shallow_feats], axis=0))
    maps = [T.softmax(g, axis=0) for g in logits]
    if not gate.hierarchical:
        maps = maps[:1] + [
            Tensor(np.full(g.shape, 1.0 / gate.num_experts, dtype=g.dtype)) for g in logits[1:]]
    return GatingMaps(maps)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MOME"
CKPT_VERSION = 1
KIND_EXPERT, KIND_GATE, KIND_FLAT_GATE = 0, 1, 2
NO_MODALITY = 255


def checkpoint_bytes(net: ExpertNetwork | GatingNetwork) -> bytes:
    """Binary layout (little-endian)::

        "MOME" | u16 version | u8 kind | u8 modality
        u32 record count, then per record:
        u16 name length | name (utf-8) | u8 ndim | ndim x u32 dims | float32 data
    """
    if isinstance(net, GatingNetwork):
        kind = KIND_GATE if net.hierarchical else KIND_FLAT_GATE
        modality = NO_MODALITY
    else:
        kind = KIND_EXPERT
        modality = NO_MODALITY if net.modality is None else int(net.modality)
    params = list(net.named_parameters())
    parts = [CKPT_MAGIC, struct.pack("<HBB", CKPT_VERSION, kind, modality),
             struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(p.data.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes):
    r = _Reader(buf)
    if r.take(4) != CKPT_MAGIC:
        raise BadMagicError("bad magic: not a MOME checkpoint")
    version, kind, modality = r.unpack("<HBB")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise TruncatedFileError(f"{len(buf) - r.pos} trailing bytes after last record")
    return kind, modality, state


def load_checkpoint(path) -> ExpertNetwork | GatingNetwork:
    kind, modality, state = parse_checkpoint(Path(path).read_bytes())
    return network_from_state(kind, modality, state)


def network_from_state(kind: int, modality: int, state: dict[str, np.ndarray]):
    first = state["net.encoder.0.0.conv.weight"]
    base, in_ch = first.shape[0], first.shape[1]
    levels = sum(1 for k in state if k.startswith("net.heads.") and k.endswith(".weight"))
    out_ch = state["net.heads.0.weight"].shape[0]
    if kind == KIND_EXPERT:
        mod = None if modality == NO_MODALITY else Modality(modality)
        net = ExpertNetwork(mod, base, levels, out_ch, in_channels=in_ch)
    elif kind in (KIND_GATE, KIND_FLAT_GATE):
        width = (in_ch - 1) // out_ch
        net = GatingNetwork(out_ch, width, base, levels, hierarchical=kind == KIND_GATE)
    else:
        raise ContractError(f"unknown network kind {kind}")
    net.load_state_dict(state)
    return net
