"""Video clips, augmentation, the synthetic motion dataset and manifest I/O.

Clip files ("VCLP", little endian)::

    b"VCLP", u32 version, u32 T, u32 H, u32 W, u32 C, then T*H*W*C uint8
    pixels in (frame, row, column, channel) order.

A dataset directory holds ``manifest.jsonl`` (one record per clip:
``{"id", "path", "label", "frames", "split"}``, paths relative to the
directory) and ``dataset.json`` (class names plus generator metadata).

Bilinear resizing uses half-pixel centres: output pixel ``d`` samples source
coordinate ``(d + 0.5) * in / out - 0.5``, clamped to ``[0, in - 1]``, and the
interpolated value is rounded with ``floor(v + 0.5)``.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ClipIOError, ConfigError, DataError, ParameterError
from .tensor import Rng

CLIP_MAGIC = b"VCLP"
CLIP_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

# Motion patterns, in the order classes are assigned when none are named.
PATTERNS = ("left", "right", "up", "down", "rotate_cw", "rotate_ccw", "grow", "shrink")
# Patterns whose label survives a left-right mirror.
FLIP_INVARIANT = frozenset({"up", "down", "grow", "shrink"})
SHAPES = ("bar", "ellipse", "triangle")


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    label: int = 0
    id: str = ""

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[0] < 1 or f.shape[3] != 3 or f.dtype != np.uint8:
            raise DataError(f"clip {self.id!r}: frames must be uint8 (T, H, W, 3), got {f.dtype} {f.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return VideoClip(np.ascontiguousarray(frames), self.label, self.id)


@dataclass
class ClipBatch:
    x: np.ndarray  # (N, 3, T, h, w) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    ids: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# clip files
# ---------------------------------------------------------------------------

def write_clip(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    t, h, w, c = frames.shape
    try:
        with open(path, "wb") as f:
            f.write(CLIP_MAGIC)
            f.write(struct.pack("<5I", CLIP_VERSION, t, h, w, c))
            f.write(frames.tobytes())
    except OSError as e:
        raise ClipIOError(f"{path}: cannot write clip ({e})") from e


def read_clip(path, label: int = 0, clip_id: Optional[str] = None) -> VideoClip:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ClipIOError(f"{path}: cannot read clip ({e})") from e
    if len(raw) < 24 or raw[:4] != CLIP_MAGIC:
        raise ClipIOError(f"{path}: not a VCLP clip file")
    version, t, h, w, c = struct.unpack("<5I", raw[4:24])
    if version != CLIP_VERSION:
        raise ClipIOError(f"{path}: unsupported clip version {version}")
    if len(raw) != 24 + t * h * w * c:
        raise ClipIOError(f"{path}: payload size does not match header {t}x{h}x{w}x{c}")
    if c != 3:
        raise ClipIOError(f"{path}: expected 3 channels, got {c}")
    frames = np.frombuffer(raw, dtype=np.uint8, offset=24).reshape(t, h, w, c)
    return VideoClip(frames, label, Path(path).stem if clip_id is None else clip_id)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ClipRecord:
    id: str
    path: str
    label: int
    frames: int
    split: str


class DatasetManifest:
    def __init__(self, root, records: Sequence[ClipRecord], classes: Optional[list] = None,
                 meta: Optional[dict] = None):
        self.root = Path(root)
        self.records = list(records)
        self.meta = dict(meta or {})
        if classes is None:
            k = 1 + max((r.label for r in self.records), default=-1)
            classes = [str(i) for i in range(k)]
        self.classes = list(classes)
        self._cache: dict = {}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def flip_invariant(self) -> bool:
        """False when some class would change meaning under a horizontal flip."""
        return bool(self.meta.get("flip_invariant", True))

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def path(self, i: int) -> Path:
        return self.root / self.records[i].path

    def clip(self, i: int) -> VideoClip:
        if i not in self._cache:
            r = self.records[i]
            clip = read_clip(self.path(i), r.label, r.id)
            if clip.num_frames != r.frames:
                raise DataError(f"{self.path(i)}: manifest says {r.frames} frames, file has {clip.num_frames}")
            self._cache[i] = clip
        return self._cache[i]

    def validate(self) -> None:
        k = self.num_classes
        seen = set()
        for r in self.records:
            if r.split not in SPLITS:
                raise DataError(f"clip {r.id}: unknown split {r.split!r}")
            if r.id in seen:
                raise DataError(f"clip id {r.id} appears more than once (splits must be disjoint)")
            seen.add(r.id)
            if not 0 <= r.label < k:
                raise DataError(f"clip {r.id}: label {r.label} outside [0, {k})")
            if r.frames < 1:
                raise DataError(f"clip {r.id}: frame count must be >= 1")
            if not (self.root / r.path).is_file():
                raise DataError(f"clip {r.id}: file {self.root / r.path} not found")
        used = {r.label for r in self.records}
        if self.records and used != set(range(k)):
            raise DataError(f"labels are not dense in [0, {k}): missing {sorted(set(range(k)) - used)}")

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / "manifest.jsonl", "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        meta = {"format_version": MANIFEST_VERSION, "classes": self.classes, **self.meta}
        (self.root / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    root, jsonl = (path, path / "manifest.jsonl") if path.is_dir() else (path.parent, path)
    try:
        lines = jsonl.read_text().splitlines()
    except OSError as e:
        raise ClipIOError(f"{jsonl}: cannot read manifest ({e})") from e
    names = {f.name for f in fields(ClipRecord)}
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            records.append(ClipRecord(**{k: d[k] for k in names}))
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{jsonl}:{n}: bad manifest record ({e})") from e
    classes, meta = None, {}
    meta_path = root / "dataset.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        if meta.pop("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise DataError(f"{meta_path}: unsupported manifest version")
        classes = meta.pop("classes", None)
    manifest = DatasetManifest(root, records, classes, meta)
    if validate:
        manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _bilinear_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(clip: VideoClip, out_h: int = 128, out_w: int = 171) -> VideoClip:
    t, h, w, _ = clip.frames.shape
    if (h, w) == (out_h, out_w):
        return clip.with_frames(clip.frames.copy())
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    f = clip.frames.astype(np.float64)
    fy = fy[None, :, None, None]
    fx = fx[None, None, :, None]
    top = f[:, y0][:, :, x0] * (1 - fx) + f[:, y0][:, :, x1] * fx
    bottom = f[:, y1][:, :, x0] * (1 - fx) + f[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return clip.with_frames(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def crop(clip: VideoClip, row: int, col: int, size: int) -> VideoClip:
    return clip.with_frames(clip.frames[:, row: row + size, col: col + size])


def random_spatial_crop(clip: VideoClip, size: int, rng: Rng) -> VideoClip:
    """One offset, drawn row first then column, applied to every frame."""
    _, h, w, _ = clip.frames.shape
    if h < size or w < size:
        raise DataError(f"clip {clip.id}: frame {h}x{w} smaller than crop {size}")
    row = rng.uniform_int(0, h - size)
    col = rng.uniform_int(0, w - size)
    return crop(clip, row, col, size)


def center_crop(clip: VideoClip, size: int) -> VideoClip:
    _, h, w, _ = clip.frames.shape
    if h < size or w < size:
        raise DataError(f"clip {clip.id}: frame {h}x{w} smaller than crop {size}")
    return crop(clip, (h - size) // 2, (w - size) // 2, size)


def _window(clip: VideoClip, window: int, start: int, mode: str) -> VideoClip:
    t = clip.num_frames
    if mode == "strict":
        return clip.with_frames(clip.frames[start: start + window])
    return clip.with_frames(clip.frames[(start + np.arange(window)) % t])


def temporal_jitter(clip: VideoClip, window: int, rng: Rng, mode: str = "strict") -> VideoClip:
    """Consecutive ``window`` frames from a uniform start.

    ``loop`` mode wraps indices modulo T, and with T < window the start is
    drawn from [0, T - 1].
    """
    t = clip.num_frames
    if mode not in ("strict", "loop"):
        raise ParameterError(f"unknown jitter mode {mode!r}")
    if t < window and mode == "strict":
        raise DataError(f"clip {clip.id}: {t} frames, need at least {window} in strict mode")
    start = rng.uniform_int(0, max(t - window, 0) if t >= window else t - 1)
    return _window(clip, window, start, mode)


def center_window(clip: VideoClip, window: int, mode: str = "strict") -> VideoClip:
    t = clip.num_frames
    if t < window and mode == "strict":
        raise DataError(f"clip {clip.id}: {t} frames, need at least {window} in strict mode")
    return _window(clip, window, max(t - window, 0) // 2, mode)


def hflip(clip: VideoClip) -> VideoClip:
    return clip.with_frames(clip.frames[:, :, ::-1])


def horizontal_flip(clip: VideoClip, rng: Optional[Rng] = None, p: float = 0.5,
                    force: Optional[bool] = None) -> VideoClip:
    """Mirror every frame or none; one Bernoulli(p) draw per clip unless ``force`` is given."""
    flip = force if force is not None else rng.bernoulli(p)
    return hflip(clip) if flip else clip


@dataclass
class AugmentConfig:
    resize_h: int = 128
    resize_w: int = 171
    crop: int = 112
    window: int = 16
    jitter_mode: str = "strict"
    flip: bool = True
    flip_p: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def augment_clip(clip: VideoClip, cfg: AugmentConfig, rng: Rng) -> VideoClip:
    """Training path: resize, random crop, temporal jitter, horizontal flip."""
    clip = resize_bilinear(clip, cfg.resize_h, cfg.resize_w)
    clip = random_spatial_crop(clip, cfg.crop, rng)
    clip = temporal_jitter(clip, cfg.window, rng, cfg.jitter_mode)
    if cfg.flip:
        clip = horizontal_flip(clip, rng, cfg.flip_p)
    return clip


def eval_clip(clip: VideoClip, cfg: AugmentConfig) -> VideoClip:
    """Evaluation path: resize, centre crop, centre window."""
    clip = resize_bilinear(clip, cfg.resize_h, cfg.resize_w)
    clip = center_crop(clip, cfg.crop)
    return center_window(clip, cfg.window, "loop" if clip.num_frames < cfg.window else "strict")


def clip_to_tensor(clip: VideoClip) -> np.ndarray:
    """(T, H, W, 3) uint8 -> (3, T, H, W) float32 in [0, 1]."""
    return np.ascontiguousarray(clip.frames.transpose(3, 0, 1, 2), dtype=np.float32) / np.float32(255)


def load_batch(manifest: DatasetManifest, indices: Sequence[int], augment: bool,
               rng: Optional[Rng] = None, cfg: Optional[AugmentConfig] = None,
               workers: int = 1) -> ClipBatch:
    """Clip ``i`` is augmented with ``rng.substream(i)``, so results do not depend on ``workers``."""
    cfg = cfg or AugmentConfig()
    if augment and rng is None:
        raise ParameterError("augmented loading needs an Rng")
    for i in indices:
        if not 0 <= i < len(manifest.records):
            raise DataError(f"clip index {i} out of range for {len(manifest.records)} records")

    def one(i):
        clip = manifest.clip(i)
        clip = augment_clip(clip, cfg, rng.substream(i)) if augment else eval_clip(clip, cfg)
        return clip_to_tensor(clip)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            arrays = list(pool.map(one, indices))
    else:
        arrays = [one(i) for i in indices]
    labels = np.array([manifest.records[i].label for i in indices], dtype=np.int64)
    return ClipBatch(np.stack(arrays), labels, [manifest.records[i].id for i in indices])


# ---------------------------------------------------------------------------
# synthetic motion dataset
# ---------------------------------------------------------------------------

def _inside(shape: str, u: np.ndarray, v: np.ndarray, half: float) -> np.ndarray:
    a, b = half, 0.45 * half
    if shape == "bar":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if shape == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if shape == "triangle":
        return (u >= -a) & (u <= a) & (np.abs(v) <= (a - u) * (1.1 * b / a))
    raise ParameterError(f"unknown shape {shape!r}")


def render_frame(shape: str, cx: float, cy: float, half: float, angle: float,
                 color, background, size: int) -> np.ndarray:
    """One (size, size, 3) frame on a torus: the shape wraps around the borders."""
    coords = np.arange(size, dtype=np.float64)
    dx = (coords[None, :] - cx + size / 2) % size - size / 2
    dy = (coords[:, None] - cy + size / 2) % size - size / 2
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    mask = _inside(shape, u, v, half)
    frame = np.empty((size, size, 3), dtype=np.uint8)
    frame[:] = np.asarray(background, dtype=np.uint8)
    frame[mask] = np.asarray(color, dtype=np.uint8)
    return frame


@dataclass
class MotionParams:
    shape: str
    cx: int
    cy: int
    half: float
    angle: float
    color: tuple
    background: tuple
    half_range: tuple = (3.0, 8.0)
    speed: int = 1
    spin: float = 0.12


def render_clip(pattern: str, p: MotionParams, frames: int, size: int) -> np.ndarray:
    """(frames, size, size, 3) uint8 clip whose only class cue is the motion pattern."""
    if pattern in ("left", "right", "up", "down"):
        base = render_frame(p.shape, p.cx, p.cy, p.half, p.angle, p.color, p.background, size)
        axis = 1 if pattern in ("left", "right") else 0
        sign = -1 if pattern in ("left", "up") else 1
        return np.stack([np.roll(base, sign * p.speed * t, axis=axis) for t in range(frames)])
    if pattern in ("rotate_cw", "rotate_ccw"):
        sign = 1 if pattern == "rotate_cw" else -1
        return np.stack([render_frame(p.shape, p.cx, p.cy, p.half, p.angle + sign * p.spin * t,
                                      p.color, p.background, size) for t in range(frames)])
    if pattern in ("grow", "shrink"):
        lo, hi = p.half_range
        steps = np.linspace(lo, hi, frames) if frames > 1 else np.array([lo])
        if pattern == "shrink":
            steps = steps[::-1]
        return np.stack([render_frame(p.shape, p.cx, p.cy, h, p.angle, p.color, p.background, size)
                         for h in steps])
    raise ParameterError(f"unknown motion pattern {pattern!r}")


def default_patterns(classes: int, flip_safe: bool = False) -> list[str]:
    pool = [p for p in PATTERNS if p in FLIP_INVARIANT] if flip_safe else list(PATTERNS)
    if classes > len(pool):
        raise ParameterError(f"{classes} classes requested but only {len(pool)} motion patterns available"
                             + (" under flip_safe" if flip_safe else ""))
    return pool[:classes]


def _draw_params(rng: Rng, size: int) -> MotionParams:
    lo, hi = 0.12 * size, 0.25 * size
    return MotionParams(
        shape=SHAPES[rng.uniform_int(0, len(SHAPES) - 1)],
        cx=rng.uniform_int(0, size - 1),
        cy=rng.uniform_int(0, size - 1),
        half=lo + (hi - lo) * rng.random(),
        angle=2 * math.pi * rng.random(),
        color=tuple(rng.uniform_int(140, 255) for _ in range(3)),
        background=tuple(rng.uniform_int(0, 60) for _ in range(3)),
        half_range=(lo, hi),
    )


def split_counts(n: int) -> tuple[int, int, int]:
    """60/20/20 split of ``n`` groups."""
    n_val = round(0.2 * n)
    n_test = round(0.2 * n)
    return n - n_val - n_test, n_val, n_test


def generate_synthetic_dataset(out_dir, classes: int, clips_per_class: int, frames: int, size: int,
                               rng: Rng, patterns: Optional[Sequence[str]] = None,
                               flip_safe: bool = False) -> DatasetManifest:
    """Write ``classes * clips_per_class`` VCLP clips plus manifest into ``out_dir``.

    Clips come in groups: one appearance (shape, position, size, angle,
    colours) is drawn per group and rendered once under every class's motion
    pattern, so single frames carry no class information. Whole groups are
    assigned to train/val/test (60/20/20).
    """
    if patterns is None:
        patterns = default_patterns(classes, flip_safe)
    patterns = list(patterns)
    if len(patterns) != classes or len(set(patterns)) != classes:
        raise ParameterError(f"need {classes} distinct patterns, got {patterns}")
    for p in patterns:
        if p not in PATTERNS:
            raise ParameterError(f"unknown motion pattern {p!r}")
    if clips_per_class < 1 or frames < 1 or size < 4:
        raise ParameterError("clips_per_class and frames must be >= 1, size >= 4")

    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    order = rng.substream("split").permutation(clips_per_class)
    n_train, n_val, _ = split_counts(clips_per_class)
    split_of = {}
    for rank, g in enumerate(order):
        split_of[g] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    records = []
    for g in range(clips_per_class):
        params = _draw_params(rng.substream("group", g), size)
        for label, pattern in enumerate(patterns):
            clip_id = f"g{g:04d}-{pattern}"
            rel = f"clips/{clip_id}.vclp"
            write_clip(out_dir / rel, render_clip(pattern, params, frames, size))
            records.append(ClipRecord(clip_id, rel, label, frames, split_of[g]))

    meta = {
        "flip_invariant": all(p in FLIP_INVARIANT for p in patterns),
        "generator": {"classes": classes, "clips_per_class": clips_per_class, "frames": frames,
                      "size": size, "seed": rng.seed, "rng_version": 1},
    }
    manifest = DatasetManifest(out_dir, records, patterns, meta)
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# single-frame baseline
# ---------------------------------------------------------------------------

def _frame_sums(manifest: DatasetManifest, indices) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for i in indices:
        clip = manifest.clip(i)
        feats.append(clip.frames.astype(np.int64).sum(axis=(1, 2)))
        labels.extend([clip.label] * clip.num_frames)
    return np.concatenate(feats), np.array(labels)


def single_frame_baseline(manifest: DatasetManifest, train_split: str = "train",
                          eval_splits: Sequence[str] = ("val", "test")) -> float:
    """Accuracy of a per-frame mean-pixel nearest-centroid classifier.

    Every frame is classified on its own, so frame order plays no part. Features
    are integer per-channel pixel sums so identical frame multisets give
    bit-identical centroids; ties go to the lowest class index.
    """
    x, y = _frame_sums(manifest, manifest.indices(train_split))
    k = manifest.num_classes
    centroids = np.zeros((k, 3))
    for c in range(k):
        sel = x[y == c]
        if len(sel):
            centroids[c] = sel.sum(axis=0) / len(sel)
    test_idx = [i for s in eval_splits for i in manifest.indices(s)]
    xt, yt = _frame_sums(manifest, test_idx)
    dist = ((xt[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = dist.argmin(axis=1)
    return float((pred == yt).mean())
