"""Synthetic moving-sprite videos with injectable anomalies, plus frame I/O.

Frames are float32 arrays of shape (3, H, W) with values in [-1, 1].
Sprites move at constant velocity and bounce off the frame borders.
Anomalies are drawn from a random stream separate from the normal scene,
so an anomalous video is bit-identical to its normal twin before onset.

On-disk layout written by :func:`write_frame_dir`::

    <dir>/frame_0000.png ...   8-bit RGB
    <dir>/labels.txt           one 0/1 per line

Pixel mapping: ``value = clip((byte - 128) / 127, -1, 1)``, so mid-gray
(128) is exactly 0.0 and a write/read round trip is off by at most 1/254.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SPRITE_KINDS = ("square", "disc")
ANOMALY_KINDS = ("speed_burst", "direction_reversal", "intruder", "teleport")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class VideoSpec:
    width: int = 64
    height: int = 64
    length: int = 32
    n_sprites: int = 3
    sprite_kinds: tuple[str, ...] = SPRITE_KINDS
    size_range: tuple[float, float] = (8.0, 12.0)
    speed_range: tuple[float, float] = (1.0, 2.0)
    background: str = "gradient"
    seed: int = 0

    def validate(self) -> None:
        if self.width < 4 or self.height < 4 or self.length < 1:
            raise ValueError(f"bad frame geometry {self.width}x{self.height}x{self.length}")
        if self.n_sprites < 0:
            raise ValueError("n_sprites must be >= 0")
        lo, hi = self.size_range
        if not 0 < lo <= hi or hi >= min(self.width, self.height) - 2:
            raise ValueError(f"sprite size range {self.size_range} does not fit a {self.width}x{self.height} frame")
        slo, shi = self.speed_range
        if not 0 < slo <= shi:
            raise ValueError(f"speed range must be positive and ordered, got {self.speed_range}")
        unknown = set(self.sprite_kinds) - set(SPRITE_KINDS)
        if unknown or not self.sprite_kinds:
            raise ValueError(f"unknown sprite kinds {sorted(unknown)}")
        if self.background not in ("constant", "gradient"):
            raise ValueError(f"background must be 'constant' or 'gradient', got {self.background!r}")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    onset: int
    duration: int
    factor: float = 4.0
    intruder_size: float = 22.0
    intruder_speed: float = 3.0

    def validate(self, length: int) -> None:
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}; expected one of {ANOMALY_KINDS}")
        if self.onset < 0 or self.duration < 0 or self.onset + self.duration > length:
            raise ValueError(f"anomaly window [{self.onset}, {self.onset + self.duration}) exceeds length {length}")
        if self.kind == "intruder" and self.intruder_size <= 0:
            raise ValueError("intruder_size must be positive")
        if self.kind == "speed_burst" and self.factor <= 0:
            raise ValueError("speed_burst factor must be positive")


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, 3, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (T,) int8 in {0, 1}
    provenance: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must have shape (T, 3, H, W), got {self.frames.shape}")
        if len(self.labels) != len(self.frames):
            raise ValueError(f"{len(self.labels)} labels for {len(self.frames)} frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass
class _Sprite:
    kind: str
    x: float
    y: float
    vx: float
    vy: float
    size: float
    color: np.ndarray = field(repr=False)

    def step(self, w: int, h: int, scale: float = 1.0) -> None:
        r = self.size / 2
        self.x, self.vx = _reflect(self.x + self.vx * scale, self.vx, r, w - r)
        self.y, self.vy = _reflect(self.y + self.vy * scale, self.vy, r, h - r)


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    # Bounces until inside; large steps may bounce more than once.
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
        else:
            pos = 2 * hi - pos
        vel = -vel
    return pos, vel


def _random_sprite(rng: np.random.Generator, spec: VideoSpec, kind: str | None = None) -> _Sprite:
    kind = kind or spec.sprite_kinds[rng.integers(len(spec.sprite_kinds))]
    size = rng.uniform(*spec.size_range)
    r = size / 2
    x = rng.uniform(r, spec.width - r)
    y = rng.uniform(r, spec.height - r)
    speed = rng.uniform(*spec.speed_range)
    angle = rng.uniform(0, 2 * np.pi)
    color = rng.uniform(-0.1, 1.0, size=3)
    return _Sprite(kind, x, y, speed * np.cos(angle), speed * np.sin(angle), size, color)


def _background(rng: np.random.Generator, spec: VideoSpec) -> np.ndarray:
    level = rng.uniform(-0.8, -0.4, size=3)
    bg = np.broadcast_to(level[:, None, None], (3, spec.height, spec.width)).astype(np.float64)
    if spec.background == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
        ramp = (np.cos(angle) * (xx / spec.width - 0.5) + np.sin(angle) * (yy / spec.height - 0.5)) * 0.3
        bg = bg + ramp[None]
    return bg


def _coverage(kind: str, x: float, y: float, size: float, h: int, w: int) -> np.ndarray:
    """Anti-aliased coverage mask with a one-pixel soft edge."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xx - x, yy - y
    half = size / 2
    if kind == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - half
    elif kind == "disc":
        d = np.hypot(dx, dy) - half
    elif kind == "cross":
        arm = size / 6
        d1 = np.maximum(np.abs(dx) - half, np.abs(dy) - arm)
        d2 = np.maximum(np.abs(dx) - arm, np.abs(dy) - half)
        d = np.minimum(d1, d2)
    else:
        raise ValueError(f"unknown sprite kind {kind!r}")
    return np.clip(0.5 - d, 0.0, 1.0)


def _render(bg: np.ndarray, sprites: Sequence[_Sprite]) -> np.ndarray:
    frame = bg.copy()
    h, w = frame.shape[1:]
    for s in sprites:
        a = _coverage(s.kind, s.x, s.y, s.size, h, w)
        frame = frame * (1 - a) + s.color[:, None, None] * a
    return np.clip(frame, -1.0, 1.0).astype(np.float32)


def _simulate(spec: VideoSpec, anomaly: AnomalySpec | None) -> FrameSequence:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    bg = _background(rng, spec)
    sprites = [_random_sprite(rng, spec) for _ in range(spec.n_sprites)]
    labels = np.zeros(spec.length, dtype=np.int8)

    start = end = spec.length
    arng = None
    target = None
    intruder = None
    if anomaly is not None:
        anomaly.validate(spec.length)
        start, end = anomaly.onset, anomaly.onset + anomaly.duration
        labels[start:end] = 1
        arng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA5A5]))
        if sprites:
            target = sprites[int(arng.integers(len(sprites)))]
        if anomaly.kind == "intruder":
            if anomaly.intruder_size >= min(spec.width, spec.height):
                raise ValueError(f"intruder size {anomaly.intruder_size} does not fit a {spec.width}x{spec.height} frame")
            big = replace(spec, size_range=(anomaly.intruder_size, anomaly.intruder_size),
                          speed_range=(anomaly.intruder_speed, anomaly.intruder_speed))
            intruder = _random_sprite(arng, big, kind="cross")
            intruder.color = np.array([1.0, 0.9, -0.9])

    frames = []
    for t in range(spec.length):
        if t > 0:
            in_window = start <= t < end
            for s in sprites:
                scale = 1.0
                if in_window and s is target:
                    if anomaly.kind == "speed_burst":
                        scale = anomaly.factor
                    elif anomaly.kind == "direction_reversal":
                        scale = -1.0
                s.step(spec.width, spec.height, scale)
                if in_window and s is target and anomaly.kind == "teleport":
                    r = s.size / 2
                    s.x = arng.uniform(r, spec.width - r)
                    s.y = arng.uniform(r, spec.height - r)
            if intruder is not None and start < t < end:
                intruder.step(spec.width, spec.height)
        visible = list(sprites)
        if intruder is not None and start <= t < end:
            visible.append(intruder)
        frames.append(_render(bg, visible))
    stack = np.stack(frames) if frames else np.zeros((0, 3, spec.height, spec.width), np.float32)
    tag = f"synthetic seed={spec.seed}"
    if anomaly is not None:
        tag += f" anomaly={anomaly.kind}@{anomaly.onset}+{anomaly.duration}"
    return FrameSequence(stack, labels, tag)


def generate_normal(spec: VideoSpec) -> FrameSequence:
    """Normal-motion video: constant velocities, reflecting borders, all labels 0."""
    return _simulate(spec, None)


def generate_anomalous(spec: VideoSpec, anomaly: AnomalySpec) -> FrameSequence:
    """Same scene as :func:`generate_normal` with ``anomaly`` injected.

    Labels are 1 exactly on ``[onset, onset + duration)``.
    """
    return _simulate(spec, anomaly)


def video_seed(seed: int, role: str, index: int) -> int:
    role_code = {"train": 1, "test": 2}[role]
    return int(np.random.SeedSequence([seed, role_code, index]).generate_state(1)[0])


@dataclass(frozen=True)
class CorpusSpec:
    """Desk-scale corpus: normal training videos and one-anomaly test videos."""

    n_train: int = 16
    n_test: int = 8
    train_length: int = 32
    test_length: int = 48
    anomaly_kinds: tuple[str, ...] = ("speed_burst", "intruder", "teleport")
    anomaly_duration: int = 12
    seed: int = 0
    video: VideoSpec = field(default_factory=VideoSpec)


def anomaly_for_test_video(corpus: CorpusSpec, index: int, window: int = 4) -> AnomalySpec:
    kind = corpus.anomaly_kinds[index % len(corpus.anomaly_kinds)]
    rng = np.random.default_rng(video_seed(corpus.seed, "test", index))
    lo = window + 4
    hi = corpus.test_length - corpus.anomaly_duration - 4
    if hi < lo:
        raise ValueError(f"test_length {corpus.test_length} too short for anomaly duration {corpus.anomaly_duration}")
    onset = int(rng.integers(lo, hi + 1))
    # the intruder is sized relative to the frame (22 px at 64 x 64)
    size = min(22.0, 0.35 * min(corpus.video.width, corpus.video.height))
    return AnomalySpec(kind, onset, corpus.anomaly_duration, intruder_size=size)


def generate_corpus(corpus: CorpusSpec) -> list[tuple[str, str, FrameSequence]]:
    """Return ``(role, video_id, sequence)`` triples, train videos first."""
    out = []
    for i in range(corpus.n_train):
        spec = replace(corpus.video, length=corpus.train_length, seed=video_seed(corpus.seed, "train", i))
        out.append(("train", f"train_{i:02d}", generate_normal(spec)))
    for i in range(corpus.n_test):
        spec = replace(corpus.video, length=corpus.test_length, seed=video_seed(corpus.seed, "test", i))
        out.append(("test", f"test_{i:02d}", generate_anomalous(spec, anomaly_for_test_video(corpus, i))))
    return out


# ----------------------------------------------------------------------
# disk I/O
# ----------------------------------------------------------------------


def to_bytes(frame: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    q = np.rint(np.clip(frame, -1, 1) * 127 + 128)
    return q.astype(np.uint8).transpose(1, 2, 0)


def from_bytes(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    v = (img.astype(np.float32) - 128.0) / 127.0
    return np.clip(v, -1.0, 1.0).transpose(2, 0, 1).copy()


def write_frame_dir(seq: FrameSequence, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        Image.fromarray(to_bytes(frame), mode="RGB").save(path / f"frame_{t:04d}.png")
    (path / "labels.txt").write_text("".join(f"{int(v)}\n" for v in seq.labels))
    return path


def read_labels(path: str | os.PathLike) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    bad = [ln for ln in lines if ln not in ("0", "1")]
    if bad:
        raise ValueError(f"{path}: labels must be 0 or 1, found {bad[0]!r}")
    return np.array([int(v) for v in lines], dtype=np.int8)


def load_frame_dir(
    path: str | os.PathLike,
    target_resolution: tuple[int, int] | None = None,
    label_file: str | os.PathLike | None = None,
) -> FrameSequence:
    """Load image files in lexicographic order as one video.

    Frames are bilinearly resized to ``target_resolution`` (H, W) when given.
    Labels come from ``label_file`` or ``<path>/labels.txt``; without
    either, every frame is labelled normal.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"frame directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    frames = []
    for f in files:
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
                if target_resolution is not None and (im.height, im.width) != tuple(target_resolution):
                    im = im.resize((target_resolution[1], target_resolution[0]), Image.BILINEAR)
                frames.append(from_bytes(np.asarray(im)))
        except OSError as exc:
            raise ValueError(f"unreadable frame {f}: {exc}") from exc
    if label_file is None and (path / "labels.txt").exists():
        label_file = path / "labels.txt"
    if label_file is not None:
        labels = read_labels(label_file)
        if len(labels) != len(frames):
            raise ValueError(f"{label_file}: {len(labels)} labels for {len(frames)} frames")
    else:
        labels = np.zeros(len(frames), dtype=np.int8)
    if frames:
        stack = np.stack(frames)
    else:
        h, w = target_resolution or (0, 0)
        stack = np.zeros((0, 3, h, w), np.float32)
    return FrameSequence(stack, labels, str(path))


# ----------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------

MANIFEST_HEADER = "# role\tvideo_dir\tlabel_file\n"


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    video_dir: str
    label_file: str


def write_manifest(entries: Sequence[ManifestEntry], path: str | os.PathLike) -> None:
    lines = [MANIFEST_HEADER] + [f"{e.role}\t{e.video_dir}\t{e.label_file}\n" for e in entries]
    Path(path).write_text("".join(lines))


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("train", "test"):
            raise ValueError(f"{path}:{n}: expected 'role<TAB>video_dir<TAB>label_file'")
        entries.append(ManifestEntry(*parts))
    return entries


def load_manifest_videos(path: str | os.PathLike, role: str, resolution=None) -> list[tuple[str, FrameSequence]]:
    """Load every video of ``role`` listed in the manifest; paths are relative to it."""
    root = Path(path).parent
    out = []
    for e in read_manifest(path):
        if e.role != role:
            continue
        vdir = root / e.video_dir
        out.append((Path(e.video_dir).name, load_frame_dir(vdir, resolution, root / e.label_file)))
    return out
