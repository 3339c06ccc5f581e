"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import DiffusionSchedule, GuidanceConfig
from .hand import HandSpec, toy_hand
from .physics import ContactParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # hand
    k_fingers: int = 2
    joints_per_finger: int = 2
    # objects
    shapes: str = "sphere,box"
    n_objects: int = 8
    test_objects: int = 4
    grasps_per_object: int = 25
    n_points: int = 256
    squeeze: float = 5e-4
    ood_shift: float = 0.2
    # schedule
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # architecture
    blocks: int = 3
    channels: int = 8
    scalars: int = 16
    heads: int = 2
    time_dim: int = 16
    downsample_m: int = 64
    downsample_k: int = 8
    symmetry_breaking: bool = True
    pos_scale: float = 0.05
    # optimizer
    lr: float = 2e-3
    steps: int = 2000
    batch: int = 16
    objects_per_batch: int = 2
    # guidance
    guidance_lambda: float = 0.0
    guidance_t_min: int = 1
    guidance_t_max: int = 1  # 0 means T; calibrated, see README
    guidance_backtrack: int = 4
    # physics
    k_n: float = 1000.0
    c_n: float = 10.0
    c_t: float = 5.0
    mu: float = 1.0
    dt: float = 0.01
    T_sim: int = 60
    substeps: int = 8
    mass: float = 0.1
    gravity: bool = False
    # output
    out: str = "run"

    def hand(self) -> HandSpec:
        return toy_hand(self.k_fingers, self.joints_per_finger)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(
            joint_dim=self.k_fingers * self.joints_per_finger, blocks=self.blocks, channels=self.channels,
            scalars=self.scalars, heads=self.heads, time_dim=self.time_dim, downsample_m=self.downsample_m,
            downsample_k=self.downsample_k, symmetry_breaking=self.symmetry_breaking, pos_scale=self.pos_scale,
            T=self.T,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.guidance_lambda, self.guidance_t_min, self.guidance_t_max or None,
                              backtrack=self.guidance_backtrack)

    def contact(self) -> ContactParams:
        return ContactParams(self.k_n, self.c_n, self.c_t, self.mu, self.dt, self.T_sim, self.substeps,
                             self.mass, self.gravity)

    def shape_list(self) -> list[str]:
        return [s.strip() for s in self.shapes.split(",") if s.strip()]

    def with_overrides(self, **kv) -> "RunConfig":
        unknown = set(kv) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **{k: _coerce(k, v) for k, v in kv.items()})

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key = key.strip()
            if key in kv:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            kv[key] = value.strip()
        return cls().with_overrides(**kv)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, value):
    typ = _TYPES[key]
    if not isinstance(value, str):
        return value
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
    return value
