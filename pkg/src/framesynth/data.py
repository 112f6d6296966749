"""Triplet sampling, augmentation and the synthetic moving-square corpus.

Frames here are ``numpy`` float32 arrays of shape ``(H, W, 3)`` in ``[0, 1]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DegenerateAnchorError, InsufficientFramesError, ShapeError

log = logging.getLogger(__name__)

META_FILE = "meta.txt"


@dataclass
class VideoSequence:
    frames: np.ndarray              # (T, H, W, 3) float32
    timestamps: np.ndarray          # (T,) int64, strictly increasing
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if len(self.timestamps) != len(self.frames):
            raise ShapeError("one timestamp per frame required")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frames)


@dataclass
class TripletSample:
    x1: np.ndarray
    xp: np.ndarray
    x2: np.ndarray
    t1: int
    tp: int
    t2: int

    @property
    def ratio(self) -> float:
        return compute_ratio(self.t1, self.t2, self.tp)


@dataclass(frozen=True)
class AugmentSpec:
    rotations: tuple = (0, 90, 180, 270)
    hflip: bool = True
    vflip: bool = True
    crop: int = 128
    noise_sigma: float = 0.1


def compute_ratio(t_a, t_b, t_target):
    """Relative position of ``t_target`` w.r.t. anchors ``t_a`` (0) and ``t_b`` (1).

    Works elementwise on numpy arrays and torch tensors.
    """
    if torch.is_tensor(t_a) or torch.is_tensor(t_b) or torch.is_tensor(t_target):
        t_a, t_b, t_target = (torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
                              for t in (t_a, t_b, t_target))
        if bool((t_a == t_b).any()):
            raise DegenerateAnchorError("anchor timestamps coincide")
        return (t_target - t_a) / (t_b - t_a)
    if np.any(np.asarray(t_a) == np.asarray(t_b)):
        raise DegenerateAnchorError(f"anchor timestamps coincide ({t_a})")
    if np.ndim(t_a) or np.ndim(t_b) or np.ndim(t_target):
        return (np.asarray(t_target, float) - t_a) / (np.asarray(t_b, float) - t_a)
    return (float(t_target) - t_a) / (float(t_b) - t_a)


def sample_triplet(video: VideoSequence, max_gap: int, rng: np.random.Generator) -> TripletSample:
    """Three frames ``(i, i+g1, i+g1+g2)`` with gaps uniform in ``[1, max_gap]``.

    Gap pairs that do not fit in the video are redrawn, so the pair is uniform
    over the valid ones.
    """
    n = len(video)
    if n < 3:
        raise InsufficientFramesError(f"need at least 3 frames, video has {n}")
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    while True:
        g1, g2 = rng.integers(1, max_gap + 1, size=2)
        if g1 + g2 <= n - 1:
            break
    i = int(rng.integers(0, n - (g1 + g2)))
    a, b, c = i, i + int(g1), i + int(g1 + g2)
    ts = video.timestamps
    return TripletSample(video.frames[a], video.frames[b], video.frames[c],
                         int(ts[a]), int(ts[b]), int(ts[c]))


def luminance_variance(patch: np.ndarray) -> float:
    return float(np.asarray(patch, dtype=np.float64).mean(axis=-1).var())


def patch_variance_ok(patch: np.ndarray, threshold: float) -> bool:
    return luminance_variance(patch) >= threshold


def triplet_variance_ok(sample: TripletSample, threshold: float) -> bool:
    return all(patch_variance_ok(f, threshold) for f in (sample.x1, sample.xp, sample.x2))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class GeometricDraw:
    quarter_turns: int
    hflip: bool
    vflip: bool
    top: int
    left: int
    size: int


def draw_geometry(spec: AugmentSpec, shape, rng: np.random.Generator) -> GeometricDraw:
    h, w = shape[:2]
    k = int(rng.choice(spec.rotations)) // 90
    hflip = bool(spec.hflip and rng.random() < 0.5)
    vflip = bool(spec.vflip and rng.random() < 0.5)
    rh, rw = (w, h) if k % 2 else (h, w)
    if spec.crop > min(rh, rw):
        raise ShapeError(f"crop {spec.crop} larger than frame {rh}x{rw}")
    top = int(rng.integers(0, rh - spec.crop + 1))
    left = int(rng.integers(0, rw - spec.crop + 1))
    return GeometricDraw(k, hflip, vflip, top, left, spec.crop)


def apply_geometry(frame: np.ndarray, g: GeometricDraw) -> np.ndarray:
    out = np.rot90(frame, g.quarter_turns, axes=(0, 1))
    if g.hflip:
        out = out[:, ::-1]
    if g.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out[g.top:g.top + g.size, g.left:g.left + g.size])


def augment(sample: TripletSample, spec: AugmentSpec, rng: np.random.Generator) -> TripletSample:
    """One geometric draw shared by the three frames, independent noise per frame."""
    g = draw_geometry(spec, sample.x1.shape, rng)
    frames = []
    for f in (sample.x1, sample.xp, sample.x2):
        f = apply_geometry(f, g)
        if spec.noise_sigma > 0:
            f = np.clip(f + rng.normal(0.0, spec.noise_sigma, f.shape), 0.0, 1.0)
        frames.append(f.astype(np.float32))
    return replace(sample, x1=frames[0], xp=frames[1], x2=frames[2])


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one emitted sample; depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def draw_training_sample(videos: list[VideoSequence], seed: int, index: int, max_gap: int,
                         spec: AugmentSpec, var_threshold: float, max_tries: int = 20) -> TripletSample:
    """Draw, augment and variance-filter one training triplet.

    All three patches must pass the variance test; after ``max_tries``
    rejections the last draw is kept.
    """
    rng = sample_rng(seed, index)
    for _ in range(max_tries):
        video = videos[int(rng.integers(len(videos)))]
        sample = augment(sample_triplet(video, max_gap, rng), spec, rng)
        if triplet_variance_ok(sample, var_threshold):
            return sample
    log.debug("sample %d: no patch passed variance threshold %g", index, var_threshold)
    return sample


# ---------------------------------------------------------------------------
# synthetic corpus


def _texture(rng: np.random.Generator, h: int, w: int, lo: float, hi: float, smooth: float) -> np.ndarray:
    noise = rng.normal(size=(h, w, 3))
    tex = gaussian_filter(noise, sigma=(smooth, smooth, 0), mode="wrap")
    tex -= tex.min()
    tex /= max(tex.max(), 1e-12)
    return lo + (hi - lo) * tex


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_synthetic_video(n_frames: int, size: int, shape_velocity=(1, 0), seed: int = 0,
                             square: int | None = None, smooth: float = 2.0) -> VideoSequence:
    """A textured bright square translating (toroidally) over a static dark background.

    Velocities are integer px/frame so every frame is an exact shift of the
    first.  Values are pre-quantized to 8 bits so PNG round trips are lossless.
    ``meta`` records the square's top-left corner and centroid for every frame.
    """
    if size % 8:
        raise ValueError(f"size must be a multiple of 8, got {size}")
    vx, vy = shape_velocity
    if int(vx) != vx or int(vy) != vy:
        raise ValueError("velocities must be whole pixels per frame")
    vx, vy = int(vx), int(vy)
    square = square or size // 4
    rng = np.random.default_rng(seed)
    background = _texture(rng, size, size, 0.05, 0.40, smooth)
    patch = _texture(rng, square, square, 0.60, 0.95, smooth / 2)
    x0, y0 = (int(v) for v in rng.integers(0, size, size=2))
    frames, corners = [], []
    rows = np.arange(square)
    for t in range(n_frames):
        x, y = (x0 + vx * t) % size, (y0 + vy * t) % size
        f = background.copy()
        f[np.ix_((y + rows) % size, (x + rows) % size)] = patch
        frames.append(_quantize(f))
        corners.append((x, y))
    half = (square - 1) / 2
    meta = {
        "fps": 30,
        "size": size,
        "square": square,
        "velocity": (vx, vy),
        "seed": seed,
        "corners": corners,
        "centroids": [((x + half) % size, (y + half) % size) for x, y in corners],
    }
    return VideoSequence(np.stack(frames), np.arange(n_frames), meta)


def generate_corpus(n_videos: int, n_frames: int, size: int, seed: int = 0,
                    max_speed: int = 3) -> list[VideoSequence]:
    """Corpus of moving-square videos with per-video integer velocities in ``[-max_speed, max_speed]``."""
    rng = np.random.default_rng(seed)
    videos = []
    for i in range(n_videos):
        vx, vy = (int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        videos.append(generate_synthetic_video(n_frames, size, (vx, vy), seed=int(rng.integers(2**31))))
        videos[-1].meta["name"] = f"video_{i:04d}"
    return videos


def split_corpus(videos: list, seed: int, val_fraction: float = 0.1):
    """Hold out ``val_fraction`` of the videos (at least one) chosen by ``seed``."""
    n_val = max(1, int(round(val_fraction * len(videos)))) if len(videos) > 1 else 0
    order = np.random.default_rng(seed).permutation(len(videos))
    val_idx = set(order[:n_val].tolist())
    train = [v for i, v in enumerate(videos) if i not in val_idx]
    val = [v for i, v in enumerate(videos) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# on-disk corpus


def save_frame(path, frame: np.ndarray) -> None:
    arr = np.round(np.clip(frame, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)


def _format_meta(meta: dict) -> str:
    lines = []
    for key in sorted(meta):
        value = meta[key]
        if key in ("corners", "centroids"):
            value = ";".join(f"{a:g},{b:g}" for a, b in value)
        elif isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_meta(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in ("corners", "centroids"):
            meta[key] = [tuple(float(x) for x in pair.split(",")) for pair in value.split(";") if pair]
        elif key == "velocity":
            meta[key] = tuple(int(v) for v in value.split(","))
        elif key in ("fps", "size", "square", "seed"):
            meta[key] = int(value)
        else:
            meta[key] = value
    return meta


def save_video(directory, video: VideoSequence) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in zip(video.timestamps, video.frames):
        save_frame(directory / f"{int(t):05d}.png", frame)
    (directory / META_FILE).write_text(_format_meta(video.meta))


def load_video(directory) -> VideoSequence:
    directory = Path(directory)
    files = sorted(directory.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no frames in {directory}")
    frames = np.stack([load_frame(f) for f in files])
    timestamps = [int(f.stem) for f in files]
    meta_path = directory / META_FILE
    meta = _parse_meta(meta_path.read_text()) if meta_path.exists() else {}
    meta.setdefault("name", directory.name)
    return VideoSequence(frames, timestamps, meta)


def save_corpus(directory, videos: list[VideoSequence]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, video in enumerate(videos):
        save_video(directory / video.meta.get("name", f"video_{i:04d}"), video)


def load_corpus(directory) -> list[VideoSequence]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    videos = [load_video(d) for d in sorted(p for p in directory.iterdir() if p.is_dir())]
    if not videos:
        raise FileNotFoundError(f"corpus directory {directory} contains no videos")
    return videos


def to_tensor(frames) -> torch.Tensor:
    """``(H,W,3)`` or ``(N,H,W,3)`` numpy -> ``(3,H,W)`` / ``(N,3,H,W)`` float32 tensor."""
    arr = np.asarray(frames, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(arr))
    return t.permute(2, 0, 1) if t.dim() == 3 else t.permute(0, 3, 1, 2)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    t = t.detach().cpu()
    return (t.permute(1, 2, 0) if t.dim() == 3 else t.permute(0, 2, 3, 1)).numpy()
