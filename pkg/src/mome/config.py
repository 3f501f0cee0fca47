"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import Contrast, PhantomSpec
from .errors import ConfigError
from .nn import Modality
from .train import TrainConfig

_TUPLE_KEYS = {"dims": 3, "lesion_count": 2, "lesion_radius": 2, "spacing": 3}
_OPTIONAL = {"epochs_baseline": int, "iters_per_epoch": int, "lr_gate": float}


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 200
    n_test: int = 20
    n_unseen: int = 20
    seed: int = 0

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"n_train = {self.n_train}", f"n_test = {self.n_test}",
                 f"n_unseen = {self.n_unseen}"]
        p = self.phantom
        for name in ("dims", "lesion_count", "lesion_radius", "spacing"):
            lines.append(f"{name} = {','.join(str(v) for v in getattr(p, name))}")
        lines += [f"noise = {p.noise!r}", f"contrast_scale = {p.contrast_scale!r}",
                  f"normalize = {str(p.normalize).lower()}"]
        for m in Modality:
            c = p.contrast[m]
            lines.append(f"contrast.{m.label} = {c.offset!r},{c.pattern},{c.amplitude!r}")
        for f in fields(TrainConfig):
            v = getattr(self.train, f.name)
            lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None, source: str = "<config>") -> "RunConfig":
        values = parse_pairs(text, source)
        values.update(overrides or {})
        cfg = cls()
        for key, raw in values.items():
            cfg.set(key, raw)
        cfg.phantom.seed = cfg.seed
        cfg.train.seed = cfg.seed
        try:
            cfg.phantom.validate()
            cfg.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = "" if path is None else Path(path).read_text()
        return cls.from_text(text, overrides, str(path))

    def set(self, key: str, raw: str) -> None:
        try:
            self._set(key, raw.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc

    def _set(self, key: str, raw: str) -> None:
        train_fields = {f.name: f for f in fields(TrainConfig)}
        if key in ("seed", "n_train", "n_test", "n_unseen"):
            setattr(self, key, int(raw))
        elif key in _TUPLE_KEYS:
            parts = raw.split(",")
            if len(parts) != _TUPLE_KEYS[key]:
                raise ValueError(f"expected {_TUPLE_KEYS[key]} comma-separated values")
            conv = float if key == "spacing" else int
            setattr(self.phantom, key, tuple(conv(v) for v in parts))
        elif key in ("noise", "contrast_scale"):
            setattr(self.phantom, key, float(raw))
        elif key == "normalize":
            self.phantom.normalize = _bool(raw)
        elif key.startswith("contrast."):
            m = Modality.parse(key.split(".", 1)[1])
            offset, pattern, *amp = [v.strip() for v in raw.split(",")]
            self.phantom.contrast = {**self.phantom.contrast,
                                     m: Contrast(float(offset), pattern, float(amp[0]) if amp else 1.0)}
        elif key in train_fields:
            cur = getattr(TrainConfig(), key)
            if key in _OPTIONAL:
                val = None if raw.lower() == "none" else _OPTIONAL[key](raw)
            elif isinstance(cur, bool):
                val = _bool(raw)
            elif isinstance(cur, int):
                val = int(raw)
            elif isinstance(cur, float):
                val = float(raw)
            else:
                val = raw
            setattr(self.train, key, val)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        if not key.strip():
            raise ConfigError(f"{source}:{n}: empty key")
        out[key.strip()] = value.strip()
    return out
