"""Pipeline configuration: one TOML file, validated before any work starts."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .blur_synth import ScheduleBounds
from .media import atomic_write_bytes
from .mgst import MGSTConfig


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    f0: tuple[float, float] = (0.0, 255.0)
    f_r: tuple[float, float] = (0.0, 150.0)
    sweep: tuple[float, float] = (0.0, 1.0)
    n_max: tuple[int, ...] = (3, 5, 7, 9, 11)
    sigma: float = 5.0
    clip_length: int = 10
    ref_count: int = 6
    lr_factor: int = 2


@dataclass
class EstimateConfig:
    levels: int = 3
    depth_bins: int = 32
    tau_b: float = 0.15


@dataclass
class PropagateConfig:
    tau_c: float = 1.0
    flow_factor: int = 8
    fill_tol: float = 1e-4
    fill_iters: int = 500


@dataclass
class ModelConfig:
    embed_dim: int = 128
    heads: int = 4
    blocks: int = 8
    window: tuple[int, int] = (5, 9)
    kv_stride: int = 2
    encoder_stride: int = 4
    feature_channels: int = 16
    decoder_channels: int = 16
    init_std: float = 0.02


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1


@dataclass
class PathsConfig:
    frames: str | None = None
    depth: str | None = None
    flows: str | None = None
    out: str | None = None


SECTIONS = {
    "synth": SynthConfig,
    "estimate": EstimateConfig,
    "propagate": PropagateConfig,
    "model": ModelConfig,
    "run": RunConfig,
    "paths": PathsConfig,
}


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    propagate: PropagateConfig = field(default_factory=PropagateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    # -- conversion ---------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = {}
            for k, v in asdict(getattr(self, name)).items():
                if v is None:
                    continue
                section[k] = list(v) if isinstance(v, tuple) else v
            out[name] = section
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            raw = dict(data.get(name, {}))
            names = {f.name: f for f in fields(section_cls)}
            bad = set(raw) - set(names)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            for k, v in raw.items():
                if isinstance(v, list):
                    raw[k] = tuple(v)
            try:
                kwargs[name] = section_cls(**raw)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(data)

    def save(self, path: Path | str) -> None:
        atomic_write_bytes(path, self.dumps().encode())

    @classmethod
    def load(cls, path: Path | str) -> "PipelineConfig":
        return cls.loads(Path(path).read_text())

    # -- module views -------------------------------------------------------

    def schedule_bounds(self) -> ScheduleBounds:
        s = self.synth
        return ScheduleBounds(
            f0=tuple(s.f0), f_r=tuple(s.f_r), sweep=tuple(s.sweep), n_max=tuple(s.n_max), sigma=s.sigma
        )

    def mgst_config(self) -> MGSTConfig:
        m = self.model
        return MGSTConfig(
            embed_dim=m.embed_dim, heads=m.heads, blocks=m.blocks, window=tuple(m.window),
            kv_stride=m.kv_stride, encoder_stride=m.encoder_stride,
            feature_channels=m.feature_channels, decoder_channels=m.decoder_channels,
            init_std=m.init_std,
        )

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        errors = []

        def check(cond, msg):
            if not cond:
                errors.append(msg)

        def check_range(name, pair, lo, hi):
            ok = isinstance(pair, tuple) and len(pair) == 2 and all(_is_number(x) for x in pair)
            check(ok, f"{name} must be a [low, high] pair")
            if ok:
                check(lo <= pair[0] <= pair[1] <= hi, f"{name} must satisfy {lo} <= low <= high <= {hi}")

        s = self.synth
        check_range("synth.f0", s.f0, 0.0, 255.0)
        check_range("synth.f_r", s.f_r, 0.0, float("inf"))
        check_range("synth.sweep", s.sweep, 0.0, float("inf"))
        check(
            len(s.n_max) > 0 and all(_is_int(n) and n % 2 == 1 and 3 <= n <= 11 for n in s.n_max),
            "synth.n_max entries must be odd integers in [3, 11]",
        )
        check(_is_number(s.sigma) and s.sigma > 0, "synth.sigma must be > 0")
        check(_is_int(s.clip_length) and s.clip_length >= 1, "synth.clip_length must be >= 1")
        check(_is_int(s.ref_count) and s.ref_count >= 0, "synth.ref_count must be >= 0")
        check(_is_int(s.lr_factor) and s.lr_factor >= 1, "synth.lr_factor must be >= 1")

        e = self.estimate
        check(_is_int(e.levels) and e.levels >= 1, "estimate.levels must be >= 1")
        check(_is_int(e.depth_bins) and e.depth_bins >= 1, "estimate.depth_bins must be >= 1")
        check(_is_number(e.tau_b) and 0 <= e.tau_b < 1, "estimate.tau_b must be in [0, 1)")

        p = self.propagate
        check(_is_number(p.tau_c) and p.tau_c > 0, "propagate.tau_c must be > 0")
        check(_is_int(p.flow_factor) and p.flow_factor >= 1, "propagate.flow_factor must be >= 1")
        check(_is_number(p.fill_tol) and p.fill_tol > 0, "propagate.fill_tol must be > 0")
        check(_is_int(p.fill_iters) and p.fill_iters >= 1, "propagate.fill_iters must be >= 1")

        m = self.model
        check(_is_int(m.embed_dim) and m.embed_dim >= 1, "model.embed_dim must be >= 1")
        check(_is_int(m.heads) and m.heads >= 1, "model.heads must be >= 1")
        if _is_int(m.embed_dim) and _is_int(m.heads) and m.heads >= 1:
            check(m.embed_dim % m.heads == 0, "model.embed_dim must be divisible by model.heads")
        check(_is_int(m.blocks) and m.blocks >= 1, "model.blocks must be >= 1")
        check(
            isinstance(m.window, tuple) and len(m.window) == 2 and all(_is_int(x) and x >= 1 for x in m.window),
            "model.window must be two positive integers",
        )
        check(_is_int(m.kv_stride) and m.kv_stride >= 1, "model.kv_stride must be >= 1")
        check(m.encoder_stride in (1, 2, 4, 8), "model.encoder_stride must be 1, 2, 4 or 8")
        check(_is_int(m.feature_channels) and m.feature_channels >= 1, "model.feature_channels must be >= 1")
        check(_is_int(m.decoder_channels) and m.decoder_channels >= 1, "model.decoder_channels must be >= 1")
        check(_is_number(m.init_std) and m.init_std >= 0, "model.init_std must be >= 0")

        r = self.run
        check(_is_int(r.seed) and r.seed >= 0, "run.seed must be a non-negative integer")
        check(_is_int(r.jobs) and r.jobs >= 1, "run.jobs must be >= 1")
        if errors:
            raise ConfigError("; ".join(errors))


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)
