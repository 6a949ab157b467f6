"""Baseline U-Net and cross-parallel (CPNet) future-frame predictors.

A model is an immutable list of layer nodes evaluated in order by
:func:`forward_predict`. Parameter tensors live beside the topology in a
name-keyed dict; the optimizer updates their data in place.

Variants:

* ``baseline``  -- one U-Net over the channel-stacked frames.
* ``cpnet075``  -- one quarter-width encoder per frame, bottleneck
  features and skips concatenated into a full-width shared decoder.
* ``cpnet037``  -- fully parallel quarter-width U-Nets; their outputs are
  concatenated and fused by a small full-resolution head.

Shift nodes are inserted after every conv block of every split stage when
``shift_enabled`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("baseline", "cpnet075", "cpnet037")


@dataclass(frozen=True)
class UNetConfig:
    in_channels_per_frame: int = 3
    n_frames: int = 4
    base_channels: int = 32
    depth: int = 3
    out_channels: int = 3
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if min(self.in_channels_per_frame, self.n_frames, self.base_channels, self.out_channels) < 1:
            raise ValueError("channel counts and n_frames must be positive")
        if self.base_channels % (2 * self.n_frames):
            raise ValueError(
                f"base_channels={self.base_channels} must be divisible by 2*n_frames={2 * self.n_frames}"
            )
        step = 2**self.depth
        if self.height % step or self.width % step:
            raise ValueError(f"resolution {self.height}x{self.width} not divisible by 2**depth={step}")

    def widths(self) -> list[int]:
        """Channel width per level; the last entry is the bottleneck."""
        return [self.base_channels * 2**lvl for lvl in range(self.depth + 1)]


@dataclass(frozen=True)
class CPNetConfig:
    base: UNetConfig = field(default_factory=UNetConfig)
    split_encoder: bool = True
    split_decoder: bool = True
    shift_enabled: bool = True
    shift_fraction: Fraction = Fraction(1, 4)

    def __post_init__(self):
        object.__setattr__(self, "shift_fraction", Fraction(self.shift_fraction))
        if self.split_decoder and not self.split_encoder:
            raise ValueError("split_decoder requires split_encoder")
        if not 0 <= self.shift_fraction <= 1:
            raise ValueError(f"shift_fraction must lie in [0, 1], got {self.shift_fraction}")
        if self.shift_enabled and self.split_encoder and self.shift_fraction > 0:
            for c in split_stage_widths(self):
                moved = c * self.shift_fraction
                if moved.denominator != 1 or moved < 2 or moved % 2:
                    raise ValueError(
                        f"shift_fraction {self.shift_fraction} of per-path width {c} gives {moved} channels; "
                        "need an even integer >= 2"
                    )

    @property
    def variant(self) -> str:
        if not self.split_encoder:
            return "baseline"
        return "cpnet037" if self.split_decoder else "cpnet075"


def split_stage_widths(cfg: CPNetConfig) -> list[int]:
    n = cfg.base.n_frames
    return [w // n for w in cfg.base.widths()]


def variant_config(name: str, base: UNetConfig | None = None, shift: bool = False) -> CPNetConfig:
    """Config for one Table-1 style row: ``baseline``, ``cpnet075`` or ``cpnet037``."""
    base = base or UNetConfig()
    if name == "baseline":
        return CPNetConfig(base, split_encoder=False, split_decoder=False, shift_enabled=False)
    if name == "cpnet075":
        return CPNetConfig(base, split_encoder=True, split_decoder=False, shift_enabled=shift)
    if name == "cpnet037":
        return CPNetConfig(base, split_encoder=True, split_decoder=True, shift_enabled=shift)
    raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")


def variant_label(cfg: CPNetConfig) -> str:
    label = cfg.variant
    if cfg.split_encoder:
        label += "+shift" if cfg.shift_enabled else ""
    return label


@dataclass(frozen=True)
class Node:
    """One layer. ``attrs`` is a sorted tuple of (key, value) pairs."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    attrs: tuple = ()
    outputs: tuple[str, ...] = ()

    def attr(self, key, default=None):
        return dict(self.attrs).get(key, default)

    @property
    def output_names(self) -> tuple[str, ...]:
        return self.outputs or (self.name,)


@dataclass(frozen=True)
class ModelGraph:
    config: CPNetConfig
    nodes: tuple[Node, ...]
    params: dict = field(compare=False, repr=False)
    output: str = "out"

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def label(self) -> str:
        return variant_label(self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"state dict keys differ from model: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, clip):
        return forward_predict(self, clip)


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------


class _Builder:
    def __init__(self, cfg: CPNetConfig):
        self.cfg = cfg
        self.nodes: list[Node] = []
        self.specs: list[tuple[str, tuple[int, ...], int]] = []  # (param name, shape, fan_in)

    def add(self, name, kind, inputs, outputs=(), **attrs):
        self.nodes.append(Node(name, kind, tuple(inputs), tuple(sorted(attrs.items())), tuple(outputs)))
        return outputs or (name,)

    def conv(self, name, src, cin, cout, hw, act="relu", role="interior", ref=None, k=3):
        self.add(name, "conv", [src], cin=cin, cout=cout, k=k, stride=1, pad=k // 2, act=act,
                 role=role, ref=ref or _ref(name), h=hw[0], w=hw[1])
        self.specs.append((f"{name}.weight", (cout, cin, k, k), cin * k * k))
        self.specs.append((f"{name}.bias", (cout,), 0))
        return name

    def upconv(self, name, src, cin, cout, hw, role="interior", ref=None):
        self.add(name, "upconv", [src], cin=cin, cout=cout, k=2, stride=2, pad=0,
                 role=role, ref=ref or _ref(name), h=hw[0], w=hw[1])
        self.specs.append((f"{name}.weight", (cin, cout, 2, 2), cin))
        self.specs.append((f"{name}.bias", (cout,), 0))
        return name

    def block(self, prefix, src, cin, cout, hw, role1="interior"):
        a = self.conv(f"{prefix}.conv1", src, cin, cout, hw, role=role1)
        return self.conv(f"{prefix}.conv2", a, cout, cout, hw)

    def pool(self, name, src):
        self.add(name, "pool", [src], size=2)
        return name

    def concat(self, name, srcs):
        self.add(name, "concat", srcs)
        return name

    def shift(self, name, srcs):
        outs = tuple(f"{name}:{p}" for p in range(len(srcs)))
        self.add(name, "shift", srcs, outputs=outs, fraction=str(self.cfg.shift_fraction))
        return list(outs)


def _ref(name: str) -> str:
    """Name of the corresponding baseline layer (path prefix stripped)."""
    return name.split(".", 1)[1] if name.startswith("p") and name.split(".", 1)[0][1:].isdigit() else name


def _level_hw(base: UNetConfig, level: int) -> tuple[int, int]:
    return base.height >> level, base.width >> level


def _encoders(b: _Builder, srcs: list[str], prefixes: list[str], cin: int, widths: list[int], shift: bool):
    """Parallel encoders (one per entry of ``srcs``) with optional shift barriers.

    Returns per-level skip names (list over levels of list over paths) and
    the bottleneck output names.
    """
    base = b.cfg.base
    depth = base.depth
    skips: list[list[str]] = []
    cur = list(srcs)
    c_in = cin
    for lvl in range(depth + 1):
        hw = _level_hw(base, lvl)
        stage = "mid" if lvl == depth else f"enc{lvl}"
        outs = [b.block(f"{pre}{stage}", cur[i], c_in, widths[lvl], hw) for i, pre in enumerate(prefixes)]
        if shift:
            outs = b.shift(f"shift.{stage}", outs)
        if lvl == depth:
            return skips, outs
        skips.append(outs)
        cur = [b.pool(f"{pre}{stage}.pool", outs[i]) for i, pre in enumerate(prefixes)]
        c_in = widths[lvl]


def _decoders(b: _Builder, bottoms: list[str], skips: list[list[str]], prefixes: list[str], widths, shift: bool):
    base = b.cfg.base
    cur = list(bottoms)
    for lvl in reversed(range(base.depth)):
        hw = _level_hw(base, lvl)
        outs = []
        for i, pre in enumerate(prefixes):
            up = b.upconv(f"{pre}dec{lvl}.up", cur[i], widths[lvl + 1], widths[lvl], hw)
            cat = b.concat(f"{pre}dec{lvl}.cat", [up, skips[lvl][i]])
            outs.append(b.block(f"{pre}dec{lvl}", cat, 2 * widths[lvl], widths[lvl], hw))
        if shift:
            outs = b.shift(f"shift.dec{lvl}", outs)
        cur = outs
    return cur


def _init_params(specs, seed: int, dtype) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in specs:
        if fan_in == 0:
            arr = np.zeros(shape)
        else:
            gain = 1.0 if name.startswith("head.") else 2.0
            arr = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def build_baseline_unet(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Single U-Net consuming the ``n_frames`` frames stacked on channels."""
    return build_cpnet(variant_config("baseline", cfg), seed=seed, dtype=dtype)


def build_cpnet(cfg: CPNetConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    base = cfg.base
    n = base.n_frames
    b = _Builder(cfg)
    frames = [f"frame{i}" for i in range(n)]
    for name in frames:
        b.add(name, "input", [])
    full = base.widths()
    hw0 = _level_hw(base, 0)

    if not cfg.split_encoder:
        stacked = b.concat("stack", frames)
        skips, bottom = _encoders(b, [stacked], [""], n * base.in_channels_per_frame, full, False)
        top = _decoders(b, bottom, skips, [""], full, False)[0]
    else:
        per = split_stage_widths(cfg)
        prefixes = [f"p{i}." for i in range(n)]
        skips, bottoms = _encoders(b, frames, prefixes, base.in_channels_per_frame, per, cfg.shift_enabled)
        if cfg.split_decoder:
            tops = _decoders(b, bottoms, skips, prefixes, per, cfg.shift_enabled)
            cat = b.concat("fuse.cat", tops)
            top = b.conv("fuse", cat, full[0], full[0], hw0, role="boundary", ref="fuse")
        else:
            bottom = b.concat("mid.cat", bottoms)
            merged = [b.concat(f"enc{lvl}.cat", skips[lvl]) for lvl in range(base.depth)]
            top = _decoders(b, [bottom], [[m] for m in merged], [""], full, False)[0]
    b.conv("head", top, full[0], base.out_channels, hw0, act="tanh", role="boundary")
    b.add("out", "identity", ["head"])
    return ModelGraph(cfg, tuple(b.nodes), _init_params(b.specs, seed, dtype))


# ----------------------------------------------------------------------
# shift module
# ----------------------------------------------------------------------


def shift_features(paths: Sequence[Tensor], fraction) -> list[Tensor]:
    """Move channel slices between temporally adjacent paths.

    With ``s = C * fraction / 2``: output ``p`` takes channels ``[0, s)``
    from path ``p - 1`` and ``[s, 2s)`` from path ``p + 1`` (zeros past
    either end); remaining channels pass through unchanged.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("shift_features: need at least one path")
    shape = paths[0].shape
    for i, p in enumerate(paths):
        if p.shape != shape:
            raise ValueError(f"shift_features: path {i} shape {p.shape} differs from {shape}")
    fraction = Fraction(fraction)
    s = shape[1] * fraction / 2
    if s == 0:
        return paths
    if s.denominator != 1 or s < 0 or 2 * s > shape[1]:
        raise ValueError(f"shift_features: C={shape[1]} with fraction {fraction} gives non-integral slice {s}")
    s = int(s)
    n = len(paths)
    outs = []
    for p in range(n):
        cur = paths[p]
        prev = paths[p - 1] if p > 0 else None
        nxt = paths[p + 1] if p < n - 1 else None
        data = cur.data.copy()
        data[:, :s] = prev.data[:, :s] if prev is not None else 0
        data[:, s : 2 * s] = nxt.data[:, s : 2 * s] if nxt is not None else 0
        parents = [cur] + [t for t in (prev, nxt) if t is not None]

        def backward(g, has_prev=prev is not None, has_next=nxt is not None):
            gcur = g.copy()
            gcur[:, : 2 * s] = 0
            grads = [gcur]
            if has_prev:
                gp = np.zeros_like(g)
                gp[:, :s] = g[:, :s]
                grads.append(gp)
            if has_next:
                gn = np.zeros_like(g)
                gn[:, s : 2 * s] = g[:, s : 2 * s]
                grads.append(gn)
            return grads

        outs.append(T.custom_op(data, parents, backward, "shift"))
    return outs


# ----------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------


def forward_predict(model: ModelGraph, clip: Sequence) -> Tensor:
    """Predict the next frame from ``n_frames`` tensors of shape (B, 3, H, W)."""
    base = model.config.base
    clip = list(clip)
    if len(clip) != base.n_frames:
        raise ValueError(f"clip has {len(clip)} frames, model expects {base.n_frames}")
    dtype = next(iter(model.params.values())).dtype
    frames = []
    for i, f in enumerate(clip):
        f = f if isinstance(f, Tensor) else Tensor(np.asarray(f, dtype=dtype))
        if f.ndim == 3:
            f = Tensor(f.data[None])
        want = (base.in_channels_per_frame, base.height, base.width)
        if f.ndim != 4 or f.shape[1:] != want:
            raise ValueError(f"frame {i} has shape {f.shape}, expected (B, {want[0]}, {want[1]}, {want[2]})")
        frames.append(f)
    if len({f.shape for f in frames}) != 1:
        raise ValueError("clip frames have differing shapes")

    env: dict[str, Tensor] = {}
    params = model.params
    for node in model.nodes:
        k = node.kind
        if k == "input":
            env[node.name] = frames[int(node.name[len("frame"):])]
        elif k == "conv":
            a = dict(node.attrs)
            y = T.conv2d(env[node.inputs[0]], params[f"{node.name}.weight"], params[f"{node.name}.bias"],
                         stride=a["stride"], padding=a["pad"])
            act = a["act"]
            env[node.name] = T.relu(y) if act == "relu" else T.tanh(y) if act == "tanh" else y
        elif k == "upconv":
            a = dict(node.attrs)
            env[node.name] = T.conv_transpose2d(env[node.inputs[0]], params[f"{node.name}.weight"],
                                                params[f"{node.name}.bias"], stride=a["stride"], padding=a["pad"])
        elif k == "pool":
            env[node.name] = T.maxpool2d(env[node.inputs[0]], node.attr("size"))
        elif k == "concat":
            env[node.name] = T.concat_channels([env[s] for s in node.inputs])
        elif k == "shift":
            outs = shift_features([env[s] for s in node.inputs], Fraction(node.attr("fraction")))
            env.update(zip(node.outputs, outs))
        elif k == "identity":
            env[node.name] = env[node.inputs[0]]
        else:
            raise ValueError(f"unknown node kind {k!r} in {node.name}")
    return env[model.output]


def with_shift(cfg: CPNetConfig, enabled: bool) -> CPNetConfig:
    return replace(cfg, shift_enabled=enabled)


# ----------------------------------------------------------------------
# checkpoint files
# ----------------------------------------------------------------------


def config_meta(cfg: CPNetConfig) -> dict[str, str]:
    b = cfg.base
    return {
        "variant": cfg.variant,
        "shift_enabled": str(int(cfg.shift_enabled)),
        "shift_fraction": str(cfg.shift_fraction),
        "in_channels_per_frame": str(b.in_channels_per_frame),
        "n_frames": str(b.n_frames),
        "base_channels": str(b.base_channels),
        "depth": str(b.depth),
        "out_channels": str(b.out_channels),
        "height": str(b.height),
        "width": str(b.width),
    }


def config_from_meta(meta: dict[str, str]) -> CPNetConfig:
    try:
        base = UNetConfig(**{k: int(meta[k]) for k in ("in_channels_per_frame", "n_frames", "base_channels",
                                                      "depth", "out_channels", "height", "width")})
        cfg = variant_config(meta["variant"], base, bool(int(meta["shift_enabled"])))
        return replace(cfg, shift_fraction=Fraction(meta["shift_fraction"]))
    except KeyError as exc:
        raise ValueError(f"checkpoint metadata lacks {exc}") from exc


def save_model(model: ModelGraph, path) -> None:
    """Parameters in layer order plus the config block (see :mod:`cpnet.serialize`)."""
    from . import serialize

    serialize.save(path, model.state_dict(), config_meta(model.config))


def load_model(path, expect: CPNetConfig | None = None) -> ModelGraph:
    """Rebuild the model described by the file and load its parameters.

    Shapes must match parameter-for-parameter; with ``expect`` the stored
    config must also equal it.
    """
    from . import serialize

    arrays, meta = serialize.load(path)
    cfg = config_from_meta(meta)
    if expect is not None and cfg != expect:
        raise ValueError(f"checkpoint config {config_meta(cfg)} differs from expected {config_meta(expect)}")
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    model = build_cpnet(cfg, dtype=dtype)
    model.load_state_dict(arrays)
    return model
