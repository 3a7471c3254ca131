"""Pipeline configuration: every stage constant, overridable from key=value files."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .features import FeatureConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0

    # retrieval
    top_n: int = 100
    vocab_k: int = 32
    vocab_train_size: int = 20000

    # dense features
    coarse_stride: int = 16
    coarse_patch: int = 64
    fine_stride: int = 4
    fine_patch: int = 24
    binary: bool = False
    binarizer_min_sample: int = 1000

    # matching / homography verification
    keep: int = 10
    tau_h: float = 8.0
    h_min_inliers: int = 12
    h_confidence: float = 0.999
    h_max_iter: int = 2000

    # pose estimation
    tau_p: float = 10.0
    reference_long_side: int = 1600
    p3p_confidence: float = 0.999
    p3p_max_iter: int = 5000
    min_inliers: int = 12

    # pose verification
    use_densepv: bool = True
    retrieval_only: bool = False
    render_radius: float = 10.0
    render_source_stride: int = 1
    splat_max: int = 5
    densepv_stride: int = 8
    densepv_patch: int = 16
    cell_valid_floor: float = 0.5
    valid_fraction_floor: float = 0.3

    # working resolution
    max_working_size: int = 1600

    # optional pre-extracted feature maps ("<image id>.dfmp" per image)
    features_dir: str = ""

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            coarse_stride=self.coarse_stride, coarse_patch=self.coarse_patch,
            fine_stride=self.fine_stride, fine_patch=self.fine_patch,
        )

    def effective_tau_p(self, long_side: int) -> float:
        """Reprojection threshold at the working resolution.

        tau_p is stated at the reference long side and scaled
        proportionally, but never below twice the fine-grid stride: grid
        cell centers carry about one stride of quantization, so a tighter
        threshold would reject correct dense matches wholesale.
        """
        scaled = self.tau_p * long_side / self.reference_long_side
        return max(scaled, 2.0 * self.fine_stride)


_BOOL_WORDS = {"true": True, "on": True, "yes": True, "1": True,
               "false": False, "off": False, "no": False, "0": False}


def _coerce(name: str, kind, raw: str):
    raw = raw.strip().strip('"').strip("'")
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    try:
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from e


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    kinds = {f.name: f.type for f in fields(PipelineConfig)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    updates = {}
    for key, raw in overrides.items():
        name = key.replace("-", "_")
        if name not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types.get(kinds[name], str) if isinstance(kinds[name], str) else kinds[name]
        updates[name] = _coerce(name, kind, str(raw))
    return replace(config, **updates)


def load_config_file(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a key=value config file (one setting per line, # comments)."""
    base = base or PipelineConfig()
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, raw = stripped.split("=", 1)
        overrides[key.strip()] = raw.strip()
    return apply_overrides(base, overrides)
