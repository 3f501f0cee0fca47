"""Synthetic multi-modality lesion phantoms and their on-disk formats."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    BadMagicError,
    ContractError,
    FormatError,
    GenerationError,
    TruncatedFileError,
    VersionMismatchError,
)
from .nn import Modality

# ---------------------------------------------------------------- types


@dataclass
class Volume:
    data: np.ndarray
    modality: Modality
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if self.data.ndim != 3:
            raise ContractError(f"volume must be 3-D, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Contrast:
    """How one modality renders tissue and lesions.

    ``offset`` is added to lesion voxels (negative = hypo-intense);
    ``pattern`` names the background texture, scaled by ``amplitude``.
    """
    offset: float
    pattern: str
    amplitude: float = 2.0


DEFAULT_CONTRAST = {
    Modality.T1: Contrast(-2.5, "ramp"),
    Modality.T2: Contrast(2.0, "stripes"),
    Modality.T1CE: Contrast(2.5, "checker"),
    Modality.FLAIR: Contrast(3.0, "blobs"),
    Modality.DWI: Contrast(2.0, "shells"),
}


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 16, 16)
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[int, int] = (2, 3)
    contrast: dict = field(default_factory=lambda: dict(DEFAULT_CONTRAST))
    contrast_scale: float = 1.0
    noise: float = 0.4
    seed: int = 0
    normalize: bool = True
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        lo, hi = self.lesion_count
        rlo, rhi = self.lesion_radius
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ContractError(f"bad dims {self.dims}")
        if not 0 <= lo <= hi:
            raise ContractError(f"bad lesion count range {self.lesion_count}")
        if not 1 <= rlo <= rhi:
            raise ContractError(f"lesion radius must be >= 1 voxel, got {self.lesion_radius}")
        if self.noise < 0:
            raise ContractError("noise sigma must be non-negative")
        missing = [m for m in Modality if m not in self.contrast]
        if missing:
            raise ContractError(f"contrast table lacks {missing}")

    def shifted(self, contrast_scale: float = 0.8, noise_scale: float = 1.5) -> "PhantomSpec":
        """Variant with weaker lesion contrast and more noise (unseen-domain set)."""
        return replace(self, contrast_scale=self.contrast_scale * contrast_scale,
                       noise=self.noise * noise_scale)


@dataclass
class TrainSample:
    volume: Volume
    label: np.ndarray
    dataset_id: str = ""
    task_id: str = ""
    lesions: tuple = ()

    @property
    def modality(self) -> Modality:
        return self.volume.modality


# ---------------------------------------------------------------- generation

def ball_offsets(radius: int) -> np.ndarray:
    """Integer offsets ``(dz, dy, dx)`` with squared norm <= radius^2."""
    r = int(radius)
    g = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(g, g, g, indexing="ij")
    inside = dz ** 2 + dy ** 2 + dx ** 2 <= r * r
    return np.stack([dz[inside], dy[inside], dx[inside]], axis=1)


def rasterize_ball(mask: np.ndarray, center, radius: int) -> None:
    """Set the discrete ball in place; the ball must fit inside ``mask``."""
    pts = ball_offsets(radius) + np.asarray(center)
    if pts.min() < 0 or np.any(pts.max(axis=0) >= mask.shape):
        raise GenerationError(f"ball at {tuple(center)} radius {radius} leaves the volume {mask.shape}")
    mask[pts[:, 0], pts[:, 1], pts[:, 2]] = 1


def tissue_pattern(name: str, dims, rng: np.random.Generator) -> np.ndarray:
    """Background texture in [-1, 1] with a random phase."""
    z, y, x = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=2)
    if name == "ramp":
        return 2.0 * z / max(dims[0] - 1, 1) - 1.0
    if name == "stripes":
        return np.sin(2 * np.pi * x / 8 + phase[0])
    if name == "checker":
        return np.sin(2 * np.pi * y / 8 + phase[0]) * np.sin(2 * np.pi * z / 8 + phase[1])
    if name == "blobs":
        smooth = gaussian_filter(rng.standard_normal(dims), sigma=2.0, mode="wrap")
        return smooth / max(np.abs(smooth).max(), 1e-12)
    if name == "shells":
        c = [(n - 1) / 2 for n in dims]
        r = np.sqrt((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2)
        return np.cos(2 * np.pi * r / 6 + phase[0])
    if name == "flat":
        return np.zeros(dims)
    raise ContractError(f"unknown tissue pattern {name!r}")


def place_lesions(spec: PhantomSpec, rng: np.random.Generator, max_tries: int = 200):
    """Sample non-touching lesion (center, radius) pairs that fit in the volume."""
    lo, hi = spec.lesion_count
    rlo, rhi = spec.lesion_radius
    count = int(rng.integers(lo, hi + 1))
    lesions = []
    for _ in range(count):
        r = int(rng.integers(rlo, rhi + 1))
        if any(2 * r + 1 > n for n in spec.dims):
            raise GenerationError(f"lesion radius {r} cannot fit in dims {spec.dims}")
        for _ in range(max_tries):
            c = tuple(int(rng.integers(r, n - r)) for n in spec.dims)
            if all(np.sum((np.array(c) - oc) ** 2) > (r + orad + 1) ** 2 for oc, orad in lesions):
                lesions.append((c, r))
                break
        else:
            raise GenerationError(f"could not place {count} separated lesions in {spec.dims}")
    return lesions


def generate_phantom(spec: PhantomSpec, modality: Modality, seed: int | None = None,
                     dataset_id: str = "", task_id: str = "") -> TrainSample:
    """One phantom; deterministic in ``(spec, modality, seed)`` (``seed`` defaults to ``spec.seed``)."""
    spec.validate()
    modality = Modality(modality)
    s = spec.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(s), int(modality)]))
    contrast = spec.contrast[modality]
    lesions = place_lesions(spec, rng)
    label = np.zeros(spec.dims, dtype=np.uint8)
    for c, r in lesions:
        rasterize_ball(label, c, r)
    img = contrast.amplitude * tissue_pattern(contrast.pattern, spec.dims, rng)
    img = img + spec.contrast_scale * contrast.offset * label
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=spec.dims)
    if spec.normalize:
        img = (img - img.mean()) / max(img.std(), 1e-8)
    vol = Volume(img.astype(np.float32), modality, spec.spacing)
    return TrainSample(vol, label, dataset_id, task_id, tuple(lesions))


def prevalence_band(spec: PhantomSpec) -> tuple[float, float]:
    """Bounds on the foreground fraction of a single phantom."""
    n = float(np.prod(spec.dims))
    lo = spec.lesion_count[0] * len(ball_offsets(spec.lesion_radius[0])) / n
    hi = spec.lesion_count[1] * len(ball_offsets(spec.lesion_radius[1])) / n
    return lo, hi


def dataset_id_for(modality: Modality) -> str:
    return f"synth-{modality.label}"


UNSEEN_DATASET = "unseen-mixed"


def make_samples(spec: PhantomSpec, modality: Modality, count: int, seed: int,
                 dataset_id: str | None = None, start: int = 0) -> list[TrainSample]:
    """``count`` phantoms of one modality with per-sample seeds derived from ``seed``."""
    modality = Modality(modality)
    ds = dataset_id or dataset_id_for(modality)
    task = f"{ds}/{modality.label}"
    out = []
    for i in range(start, start + count):
        sub = int(np.random.SeedSequence([int(seed), int(modality), i]).generate_state(1)[0])
        out.append(generate_phantom(spec, modality, sub, ds, task))
    return out


def make_unseen(spec: PhantomSpec, per_modality: int, seed: int) -> list[TrainSample]:
    """Mixed-modality held-out set drawn from the shifted-contrast variant of ``spec``."""
    shifted = spec.shifted()
    out = []
    for m in Modality:
        out += make_samples(shifted, m, per_modality, seed + 7919, UNSEEN_DATASET)
    return out


# ---------------------------------------------------------------- volume files

VOL_MAGIC = b"MOMEVOL1"
DTYPE_F32, DTYPE_U8 = 0, 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}
_HEADER = struct.Struct("<8sBBH3I3f")
HEADER_SIZE = _HEADER.size


def volume_bytes(data: np.ndarray, modality: Modality, spacing=(1.0, 1.0, 1.0)) -> bytes:
    """``MOMEVOL1`` | u8 dtype | u8 modality | u16 reserved | 3 x u32 dims |
    3 x f32 spacing | voxels (little-endian, C order)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ContractError(f"volume must be 3-D, got shape {data.shape}")
    code = DTYPE_U8 if data.dtype == np.uint8 else DTYPE_F32
    header = _HEADER.pack(VOL_MAGIC, code, int(Modality(modality)), 0, *data.shape, *spacing)
    return header + np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes()


def parse_volume(buf: bytes) -> Volume:
    if len(buf) < 8 or buf[:7] != VOL_MAGIC[:7]:
        raise BadMagicError("bad magic: not a MOMEVOL file")
    if buf[:8] != VOL_MAGIC:
        raise VersionMismatchError(f"volume format version {buf[7:8]!r}, expected {VOL_MAGIC[7:8]!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(f"header truncated ({len(buf)} of {HEADER_SIZE} bytes)")
    _, code, mod, _, d, h, w, *spacing = _HEADER.unpack_from(buf)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    need = HEADER_SIZE + d * h * w * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFileError(f"voxel data truncated ({len(buf)} of {need} bytes)")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after voxel data")
    data = np.frombuffer(buf, dtype=dtype, count=d * h * w, offset=HEADER_SIZE).reshape(d, h, w)
    return Volume(data.astype(dtype.newbyteorder("=")), Modality(mod), tuple(spacing))


def write_volume(path, vol: Volume) -> None:
    Path(path).write_bytes(volume_bytes(vol.data.astype(np.float32), vol.modality, vol.spacing))


def read_volume(path) -> Volume:
    return parse_volume(Path(path).read_bytes())


def write_label(path, label: np.ndarray, modality: Modality, spacing=(1.0, 1.0, 1.0)) -> None:
    Path(path).write_bytes(volume_bytes(np.asarray(label, dtype=np.uint8), modality, spacing))


def read_label(path) -> np.ndarray:
    vol = read_volume(path)
    if vol.data.dtype != np.uint8:
        raise FormatError(f"{path}: expected a u8 label volume")
    return vol.data


# ---------------------------------------------------------------- manifest

MANIFEST_HEADER = "# volume\tlabel\tmodality\tdataset_id\ttask_id\tsplit"


@dataclass(frozen=True)
class ManifestRecord:
    volume: str
    label: str
    modality: Modality
    dataset_id: str
    task_id: str
    split: str


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    lines = [MANIFEST_HEADER]
    for r in records:
        lines.append("\t".join([r.volume, r.label, r.modality.label, r.dataset_id, r.task_id, r.split]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"{path}:{n}: expected 6 tab-separated fields, got {len(parts)}")
        vol, lab, mod, ds, task, split = parts
        out.append(ManifestRecord(vol, lab, Modality.parse(mod), ds, task, split))
    return out


def load_samples(manifest, split: str | None = None, modality: Modality | None = None) -> list[TrainSample]:
    root = Path(manifest).parent
    out = []
    for r in read_manifest(manifest):
        if split is not None and r.split != split:
            continue
        if modality is not None and r.modality != modality:
            continue
        vol = read_volume(root / r.volume)
        if vol.modality != r.modality:
            raise ContractError(f"{r.volume}: header modality {vol.modality.label} != manifest {r.modality.label}")
        out.append(TrainSample(vol, read_label(root / r.label), r.dataset_id, r.task_id))
    return out


def write_dataset(out_dir, spec: PhantomSpec, n_train: int, n_test: int, n_unseen: int,
                  seed: int) -> Path:
    """Write one dataset per modality (train + test split) and the unseen
    mixed-modality test set, plus ``manifest.tsv``. Returns the manifest path."""
    out = Path(out_dir)
    records = []
    groups: list[tuple[str, Sequence[TrainSample]]] = []
    for m in Modality:
        samples = make_samples(spec, m, n_train + n_test, seed)
        groups.append(("train", samples[:n_train]))
        groups.append(("test", samples[n_train:]))
    groups.append(("unseen", make_unseen(spec, n_unseen, seed)))
    counters: dict[str, int] = {}
    for split, samples in groups:
        for s in samples:
            sub = out / s.dataset_id
            sub.mkdir(parents=True, exist_ok=True)
            i = counters.get(s.dataset_id, 0)
            counters[s.dataset_id] = i + 1
            stem = f"{s.modality.label}_{i:04d}"
            write_volume(sub / f"{stem}.vol", s.volume)
            write_label(sub / f"{stem}_label.vol", s.label, s.modality, s.volume.spacing)
            records.append(ManifestRecord(f"{s.dataset_id}/{stem}.vol", f"{s.dataset_id}/{stem}_label.vol",
                                          s.modality, s.dataset_id, s.task_id, split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest
