"""Plain-text ``key = value`` run configuration.

Lines are UTF-8, ``#`` starts a comment, blank lines are ignored. Unknown
keys are rejected. Relative paths are resolved against the directory of the
config file (or the working directory for command-line overrides).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .data import DEFAULT_FRACTIONS
from .models import ModelSpec, _BACKBONE_KEYS, _SPEC_KEYS, spec_from_mapping
from .train import TrainConfig

MODEL_KEYS = tuple(sorted(_BACKBONE_KEYS | _SPEC_KEYS))
PATH_KEYS = ("data_dir", "idx_images", "idx_labels", "test_dir", "test_idx_images",
             "test_idx_labels", "out_dir")
TRAIN_KEYS = ("lr", "batch_size", "weight_decay", "epochs", "shuffle", "early_stop_patience")
OTHER_KEYS = ("seed", "data_source", "synth_classes", "synth_per_class", "synth_noise",
              "split", "balance_target", "fractions")
ALL_KEYS = MODEL_KEYS + PATH_KEYS + TRAIN_KEYS + OTHER_KEYS
DATA_SOURCES = ("synth", "dir", "idx")


class ConfigError(ValueError):
    """Bad configuration file or override."""


def _bool(val: str) -> bool:
    low = str(val).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {val!r}")


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into a dict, rejecting unknown or repeated keys."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = val.strip()
    return out


def parse_fractions(text: str) -> tuple[Fraction, ...]:
    try:
        fr = tuple(Fraction(t.strip()) for t in str(text).split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad fraction list {text!r}") from exc
    if not fr or any(not 0 < f <= 1 for f in fr):
        raise ConfigError(f"fractions must lie in (0, 1], got {text!r}")
    return fr


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    data_source: str = "synth"
    data_dir: Path | None = None
    idx_images: Path | None = None
    idx_labels: Path | None = None
    test_dir: Path | None = None
    test_idx_images: Path | None = None
    test_idx_labels: Path | None = None
    synth_classes: int = 2
    synth_per_class: int = 428
    synth_noise: float = 0.05
    split: tuple[Fraction, Fraction, Fraction] = (Fraction(7, 10), Fraction(2, 10), Fraction(1, 10))
    balance_target: int = 0
    fractions: tuple[Fraction, ...] = DEFAULT_FRACTIONS
    out_dir: Path = Path("runs")
    pairs: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base_dir: Path | None = None,
                   overrides: dict[str, str] | None = None) -> "RunConfig":
        """Build from config-file pairs (paths relative to ``base_dir``) and overrides (relative to cwd)."""
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        merged = {k: (v, base_dir) for k, v in pairs.items()}
        for k, v in (overrides or {}).items():
            if k not in ALL_KEYS:
                raise ConfigError(f"unknown override {k!r}")
            merged[k] = (v, Path.cwd())
        cfg = cls(pairs={k: v for k, (v, _) in merged.items()})
        try:
            for key, (val, root) in merged.items():
                if key in MODEL_KEYS:
                    cfg.model[key] = val
                elif key in PATH_KEYS:
                    setattr(cfg, key, (root / Path(val)).resolve())
                elif key == "shuffle":
                    cfg.train[key] = _bool(val)
                elif key in ("lr", "weight_decay"):
                    cfg.train[key] = float(val)
                elif key in ("batch_size", "epochs", "early_stop_patience"):
                    cfg.train[key] = int(val)
                elif key == "seed":
                    cfg.seed = int(val, 0)
                elif key == "data_source":
                    if val not in DATA_SOURCES:
                        raise ConfigError(f"data_source must be one of {DATA_SOURCES}, got {val!r}")
                    cfg.data_source = val
                elif key == "synth_noise":
                    cfg.synth_noise = float(val)
                elif key in ("synth_classes", "synth_per_class", "balance_target"):
                    setattr(cfg, key, int(val))
                elif key == "split":
                    parts = parse_fractions(val)
                    if len(parts) != 3 or sum(parts) != 1:
                        raise ConfigError(f"split needs three ratios summing to 1, got {val!r}")
                    cfg.split = parts
                elif key == "fractions":
                    cfg.fractions = parse_fractions(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        cfg.model_spec()  # validate eagerly
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_pairs(parse_pairs(text, str(path)), path.parent, overrides)

    def model_spec(self) -> ModelSpec:
        try:
            return spec_from_mapping(self.model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def snapshot(self) -> dict:
        """Effective configuration for the run manifest."""
        return {
            "model": self.model_spec().to_text(),
            "train": {k: getattr(self.train_config(), k) for k in TRAIN_KEYS},
            "seed": self.seed,
            "data_source": self.data_source,
            "pairs": dict(sorted(self.pairs.items())),
        }
