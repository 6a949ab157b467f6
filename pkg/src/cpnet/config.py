"""Flat INI-style run configuration.

Every key lives in one of four sections; values are scalars (lists are
comma-separated). Example::

    [model]
    base_channels = 32
    depth = 3

    [train]
    epochs = 10

Command-line overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

from .models import CPNetConfig, UNetConfig, variant_config
from .scoring import DecisionConfig
from .synth import ANOMALY_KINDS, CorpusSpec, VideoSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


_U, _T, _C, _V, _D = UNetConfig(), TrainConfig(), CorpusSpec(), VideoSpec(), DecisionConfig()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "base_channels": (int, _U.base_channels),
        "depth": (int, _U.depth),
        "n_frames": (int, _U.n_frames),
        "height": (int, _U.height),
        "width": (int, _U.width),
        "shift_fraction": (Fraction, Fraction(1, 4)),
        "init_seed": (int, 0),
    },
    "train": {
        "lr0": (float, _T.lr0),
        "beta1": (float, _T.beta1),
        "beta2": (float, _T.beta2),
        "adam_eps": (float, _T.adam_eps),
        "batch": (int, _T.batch),
        "epochs": (int, _T.epochs),
        "seed": (int, _T.seed),
        "precision": (str, _T.precision),
        "loss_reduction": (str, _T.loss_reduction),
    },
    "data": {
        "n_train": (int, _C.n_train),
        "n_test": (int, _C.n_test),
        "train_length": (int, _C.train_length),
        "test_length": (int, _C.test_length),
        "anomaly_kinds": (_strs, _C.anomaly_kinds),
        "anomaly_duration": (int, _C.anomaly_duration),
        "seed": (int, _C.seed),
        "n_sprites": (int, _V.n_sprites),
        "size_min": (float, _V.size_range[0]),
        "size_max": (float, _V.size_range[1]),
        "speed_min": (float, _V.speed_range[0]),
        "speed_max": (float, _V.speed_range[1]),
        "background": (str, _V.background),
    },
    "eval": {
        "gamma": (float, _D.gamma),
        "polarity": (str, _D.polarity),
        "psnr_mode": (str, "standard"),
    },
}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    values: dict  # section -> key -> parsed value

    def get(self, section: str, key: str):
        return self.values[section][key]

    # -- typed views ---------------------------------------------------
    def unet(self) -> UNetConfig:
        m = self.values["model"]
        return UNetConfig(n_frames=m["n_frames"], base_channels=m["base_channels"], depth=m["depth"],
                          height=m["height"], width=m["width"])

    def cpnet(self, variant: str, shift: bool) -> CPNetConfig:
        cfg = variant_config(variant, self.unet(), shift)
        return replace(cfg, shift_fraction=self.values["model"]["shift_fraction"])

    def train(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def corpus(self) -> CorpusSpec:
        d = self.values["data"]
        m = self.values["model"]
        video = VideoSpec(width=m["width"], height=m["height"], n_sprites=d["n_sprites"],
                          size_range=(d["size_min"], d["size_max"]),
                          speed_range=(d["speed_min"], d["speed_max"]), background=d["background"])
        return CorpusSpec(n_train=d["n_train"], n_test=d["n_test"], train_length=d["train_length"],
                          test_length=d["test_length"], anomaly_kinds=d["anomaly_kinds"],
                          anomaly_duration=d["anomaly_duration"], seed=d["seed"], video=video)

    def decision(self) -> DecisionConfig:
        e = self.values["eval"]
        return DecisionConfig(gamma=e["gamma"], polarity=e["polarity"])

    def validate(self) -> "RunConfig":
        try:
            self.unet()
            self.train()
            corpus = self.corpus()
            corpus.video.validate()
            self.decision()
            for kind in corpus.anomaly_kinds:
                if kind not in ANOMALY_KINDS:
                    raise ValueError(f"unknown anomaly kind {kind!r}")
            if self.values["eval"]["psnr_mode"] not in ("standard", "literal"):
                raise ValueError("eval.psnr_mode must be 'standard' or 'literal'")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- text form -----------------------------------------------------
    def to_ini(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini())


def _parse(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        return parser(raw.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from exc


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in cp.sections():
            for key, raw in cp.items(section):
                values.setdefault(section, {})
                values[section][key] = _parse(section, key, raw)
    for item in overrides or []:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        values[section][key] = _parse(section, key, raw)
    return RunConfig(values).validate()
