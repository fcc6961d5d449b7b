"""Run configuration: typed fields, flat key=value files, profiles, digests.

The config file format is deliberately plain text, one "key = value" per
line with '#' comments, so every run can echo its effective configuration
into logs and reports verbatim. The digest is computed over sorted keys and
therefore does not depend on the order anything was specified in.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

# paper-scale training uses 640px crops for 600 epochs at lr 1e-4 (some
# benchmarks want 1e-3); the desk profile is sized to converge on a
# synthetic set within minutes on CPU
PROFILES = {
    "paper": {"image_size": 640, "epochs": 600, "lr0": 1e-4},
    "desk": {"image_size": 128, "epochs": 60, "lr0": 1e-3},
}


@dataclass
class RunConfig:
    # model switches
    use_rcca: bool = True
    cycles: int = 2
    use_rfpn: bool = True
    use_rfrm: bool = True
    use_bdm: bool = True
    refine_iterations: int = 3
    artistic_filter: str = "off"
    # proposal extraction: the seed map (probability times distance) splits
    # touching words, the probability mask recovers each word's full extent
    seed_threshold: float = 0.25
    mask_threshold: float = 0.4
    # loss weights; the boundary point term dominates numerically at small
    # image sizes and starves the field heads, so it ships scaled down
    w_cls: float = 1.0
    w_dist: float = 1.0
    w_dir: float = 1.0
    w_bp: float = 0.25
    # training
    lr0: float = 1e-4
    batch: int = 4
    epochs: int = 600
    seed: int = 0
    image_size: int = 640
    val_every: int = 10
    checkpoint_every: int = 10
    # paths
    train_manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "runs/latest"
    # evaluation / synthesis
    thresholds: tuple = (0.5, 0.75)
    synth_count: int = 100
    difficulty: str = "medium"

    def validate(self) -> "RunConfig":
        if not 0 <= self.cycles <= 4:
            raise ConfigError(f"cycles must be in [0, 4], got {self.cycles}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.thresholds:
            raise ConfigError("need at least one IoU threshold")
        for t in self.thresholds:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"IoU thresholds live in (0, 1), got {t}")
        if self.image_size % 32 != 0 or self.image_size <= 0:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.refine_iterations < 1:
            raise ConfigError(f"refine_iterations must be >= 1, got {self.refine_iterations}")
        for name in ("seed_threshold", "mask_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} lives in (0, 1), got {v}")
        for name in ("w_cls", "w_dist", "w_dir", "w_bp"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.artistic_filter not in ("off", "heuristic"):
            raise ConfigError(f"artistic_filter must be off or heuristic, got {self.artistic_filter!r}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type == "bool" or isinstance(f.default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(f.default, int) and not isinstance(f.default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(f.default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if isinstance(f.default, tuple):
        try:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from None
    return raw


def parse_config_file(path) -> dict:
    """Flat "key = value" lines to a typed override dict."""
    overrides = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {ln}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{path}: line {ln}: unknown key {key!r}")
        overrides[key] = _parse_value(key, raw)
    return overrides


def make_config(profile: str | None = None, config_file=None, **overrides) -> RunConfig:
    """Defaults <- profile <- file <- explicit overrides, then validate."""
    values: dict = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}, have {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    if config_file is not None:
        values.update(parse_config_file(config_file))
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    cfg = RunConfig(**values)
    if isinstance(cfg.thresholds, list):
        cfg.thresholds = tuple(cfg.thresholds)
    return cfg.validate()


def format_config(cfg: RunConfig) -> str:
    """Canonical echo: sorted "key = value" lines."""
    lines = []
    for key in sorted(_FIELDS):
        v = getattr(cfg, key)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines)


# filesystem locations do not change what a checkpoint means, so the digest
# guarding checkpoint/config compatibility skips them
_DIGEST_EXCLUDE = ("train_manifest", "val_manifest", "out_dir")


def config_digest(cfg: RunConfig) -> str:
    """Hex digest of the canonical form; key order cannot affect it."""
    lines = [ln for ln in format_config(cfg).splitlines()
             if ln.split(" = ")[0] not in _DIGEST_EXCLUDE]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def lr_schedule(epoch: int, lr0: float) -> float:
    """Step decay: multiply by 0.9 once every 50 epochs."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return lr0 * 0.9 ** (epoch // 50)
