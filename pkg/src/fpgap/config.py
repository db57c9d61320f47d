"""INI experiment configs: per-module sections, presets, and key=value overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .datasets import DatasetSpec
from .errors import ConfigError
from .metrics import DEFAULT_DOMAIN
from .potential import MlpConfig
from .samplers import SamplerConfig
from .sde import SdeSpec
from .training import TrainConfig

_REQUIRED = object()

# section -> key -> (parser, default); presets patch the defaults
SCHEMA = {
    "sde": {"kind": (str, "ou"), "dim": (int, 2), "T": (float, 10.0), "g": (float, 1.0)},
    "model": {"kind": (str, "potential"), "hidden": ("ints", (64, 64)), "activation": (str, "softplus")},
    "train": {
        "iterations": (int, 20_000), "lr_start": (float, 1e-3), "lr_end": (float, 1e-5),
        "schedule": (str, "exponential"), "batch_dsm": (int, 512), "batch_colloc": (int, 512),
        "t_eps": (float, 1e-3), "t_low": (float, 0.0), "record_every": (int, 100),
        "divergence_threshold": (float, 1e6),
    },
    "sampler": {"n": (int, 100_000), "steps": (int, 1000), "chunk": (int, 50_000)},
    "metrics": {"resolution": (int, 64), "domain": ("floats", DEFAULT_DOMAIN), "w2_method": (str, "emd")},
    "data": {"scale": (float, 1.0)},
    "run": {"dataset": (str, _REQUIRED), "w_r": (float, 0.0), "seed": (int, 0)},
    "experiment": {
        "datasets": ("strs", ("mixture", "circles", "checkerboard")),
        "w_r_grid": ("floats", (0.0, 0.1, 1.0, 10.0)),
        "seeds": ("ints", (0, 1, 2)),
        "heldout_colloc": (int, 4096),
        "heldout_dsm": (int, 16384),
        "workers": (int, 1),
    },
}

PRESETS = {
    # desk: default training; the grid draws 3e4 samples per sampler to keep
    # 72 sampler runs within a few CPU hours
    "desk": {"sampler.n": 30_000},
    "paper": {
        "model.hidden": (80, 80),
        "train.iterations": 100_000,
        "sampler.n": 3_000_000,
    },
}


def _parse(kind, raw: str, key: str):
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def resolve_key(key: str) -> tuple[str, str]:
    """'section.key' or a bare key that is unique across sections."""
    if "." in key:
        sec, _, name = key.partition(".")
        if sec not in SCHEMA or name not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        return sec, name
    hits = [(s, key) for s, keys in SCHEMA.items() if key in keys]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        opts = ", ".join(f"{s}.{k}" for s, k in hits)
        raise ConfigError(f"ambiguous key {key!r}; qualify it as one of {opts}")
    return hits[0]


@dataclass
class Config:
    values: dict
    preset: str = "desk"
    source: str | None = None

    def get(self, section: str, key: str):
        v = self.values[section][key]
        if v is _REQUIRED:
            where = f" in {self.source}" if self.source else ""
            raise ConfigError(f"missing required key {section}.{key}{where}")
        return v

    def sde(self) -> SdeSpec:
        s = self.values["sde"]
        return SdeSpec(kind=s["kind"], dim=s["dim"], T=s["T"], g=s["g"])

    def mlp(self) -> MlpConfig:
        m = self.values["model"]
        dim = self.values["sde"]["dim"]
        if m["kind"] == "potential":
            return MlpConfig.potential(dim, m["hidden"], m["activation"])
        if m["kind"] == "score":
            return MlpConfig.score(dim, m["hidden"], m["activation"])
        raise ConfigError(f"model.kind must be potential or score, got {m['kind']!r}")

    def train(self, w_r: float | None = None, seed: int | None = None) -> TrainConfig:
        t = dict(self.values["train"])
        return TrainConfig(w_r=self.values["run"]["w_r"] if w_r is None else w_r,
                           seed=self.values["run"]["seed"] if seed is None else seed,
                           domain=self.domain, **t)

    def sampler(self, seed: int = 0) -> SamplerConfig:
        s = self.values["sampler"]
        return SamplerConfig(n=s["n"], steps=s["steps"], seed=seed, chunk=s["chunk"])

    def dataset(self, kind: str | None = None) -> DatasetSpec:
        kind = kind or self.get("run", "dataset")
        return DatasetSpec(kind, scale=self.values["data"]["scale"])

    @property
    def domain(self) -> tuple[float, float]:
        d = self.values["metrics"]["domain"]
        if len(d) != 2 or not d[0] < d[1]:
            raise ConfigError(f"metrics.domain must be 'lo,hi' with lo < hi, got {d}")
        return d

    def flat(self) -> dict:
        out = {}
        for sec, keys in self.values.items():
            for k, v in keys.items():
                if v is not _REQUIRED:
                    out[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out


def load_config(path=None, overrides=(), preset: str = "desk") -> Config:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for dotted, v in PRESETS[preset].items():
        sec, k = dotted.split(".")
        values[sec][k] = v
    source = None
    if path is not None:
        source = str(path)
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{sec}]")
            for k, raw in cp.items(sec):
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"{path}: unknown key {k!r} in [{sec}]")
                values[sec][k] = _parse(SCHEMA[sec][k][0], raw, f"{sec}.{k}")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        sec, k = resolve_key(key.strip())
        values[sec][k] = _parse(SCHEMA[sec][k][0], raw.strip(), f"{sec}.{k}")
    return Config(values, preset, source)


def write_config(cfg: Config, path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for sec, keys in cfg.values.items():
        cp[sec] = {}
        for k, v in keys.items():
            if v is _REQUIRED:
                continue
            cp[sec][k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    with open(Path(path), "w") as fh:
        cp.write(fh)
