"""Pipeline configuration: one JSON file, one section per subsystem.

Unknown keys are rejected on load so typos never silently fall back to a
default.  Every knob referenced by the pipeline lives here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


@dataclass
class CalibSection:
    reproj_tol_px: float = 2.0


@dataclass
class RansacSection:
    min_vectors: int = 8
    min_flow_px: float = 0.5
    angular_tol_deg: float = 1.5
    iterations: int = 200
    min_inlier_ratio: float = 0.3
    seed: int = 0


@dataclass
class OcclusionSection:
    iou_skip: float = 0.35
    iou_partial: float = 0.35
    fill_min: float = 0.30
    fill_partial: float = 0.45


@dataclass
class BoxSection:
    min_mask_px: float = 100.0
    min_extent_m: float = 0.3


@dataclass
class FallbackSection:
    window: int = 5
    min_disp_m: float = 0.5


@dataclass
class AssociationSection:
    alpha: float = 0.5
    min_score: float = 0.05


@dataclass
class VelocitySection:
    max_dist_m: float = 5.0
    max_steps: int = 30


@dataclass
class KalmanSection:
    sigma_accel: float = 2.0
    sigma_obs_pos: float = 0.5
    sigma_obs_vel: float = 0.5
    init_pos_var: float = 4.0
    init_vel_var: float = 25.0
    max_coast: int = 30


@dataclass
class SmoothingSection:
    smooth_n: int = 10


@dataclass
class ShapeSection:
    voxel_size_m: float = 0.1
    lam: float = 0.1
    n_bins: int = 50
    m_bins: int = 50
    n_components: int = 20
    max_views: int = 24
    min_view_overlap: float = 0.3


@dataclass
class EvalSection:
    dist_gate_m: float = 2.0
    range_bins_m: list[float] = field(default_factory=lambda: [50.0, 120.0])
    mt_threshold: float = 0.8
    ml_threshold: float = 0.2
    occlusion_hidden: float = 0.8


@dataclass
class PipelineConfig:
    calib: CalibSection = field(default_factory=CalibSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    occlusion: OcclusionSection = field(default_factory=OcclusionSection)
    box: BoxSection = field(default_factory=BoxSection)
    fallback: FallbackSection = field(default_factory=FallbackSection)
    association: AssociationSection = field(default_factory=AssociationSection)
    velocity: VelocitySection = field(default_factory=VelocitySection)
    kalman: KalmanSection = field(default_factory=KalmanSection)
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    shape: ShapeSection = field(default_factory=ShapeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        cfg = cls()
        section_types = {f.name: f.type for f in fields(cls)}
        unknown = set(doc) - set(section_types)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name, values in doc.items():
            section = getattr(cfg, name)
            known = {f.name for f in fields(section)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            for k, v in values.items():
                setattr(section, k, v)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)
