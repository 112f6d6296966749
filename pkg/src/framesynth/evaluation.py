"""Metrics, mirror padding and the inference protocols (multi-frame, extrapolation, depth sweep)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy.signal import correlate

from .data import TripletSample, VideoSequence, to_numpy, to_tensor
from .errors import EmptyEvaluationError, ShapeError
from .model import Generator

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for ``[0, 1]`` images; ``inf`` when they are identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows of the BT.601 luminance."""
    a, b = _check_pair(a, b)
    la, lb = luminance(a), luminance(b)
    if min(la.shape) < window:
        raise ShapeError(f"image {la.shape} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    def filt(x):
        return correlate(x, w, mode="valid", method="direct")

    mu_a, mu_b = filt(la), filt(lb)
    var_a = filt(la * la) - mu_a ** 2
    var_b = filt(lb * lb) - mu_b ** 2
    cov = filt(la * lb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# padding


@dataclass(frozen=True)
class CropRecord:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    @property
    def empty(self) -> bool:
        return not any(astuple(self))


def mirror_pad(x: np.ndarray, levels: int) -> tuple[np.ndarray, CropRecord]:
    """Reflect-pad an ``(H, W, C)`` frame up to multiples of ``2**(levels-1)``.

    Padding is split between both sides of each axis (extra pixel at the end).
    """
    x = np.asarray(x)
    m = 2 ** (levels - 1)
    h, w = x.shape[:2]
    ph, pw = -h % m, -w % m
    rec = CropRecord(ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if rec.empty:
        return x, rec
    if max(rec.top, rec.bottom) >= h or max(rec.left, rec.right) >= w:
        raise ShapeError(f"frame {h}x{w} too small to mirror-pad to a multiple of {m}")
    widths = [(rec.top, rec.bottom), (rec.left, rec.right)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, widths, mode="reflect"), rec


def unpad(x: np.ndarray, rec: CropRecord) -> np.ndarray:
    h, w = x.shape[:2]
    return x[rec.top:h - rec.bottom, rec.left:w - rec.right]


# ---------------------------------------------------------------------------
# running the generator on numpy frames


@torch.no_grad()
def synthesize_frame(model: Generator, x1, x2, ratio: float, levels: int | None = None) -> np.ndarray:
    """Synthesize one ``(H, W, 3)`` frame, mirror-padding around the network as needed."""
    levels = levels or model.cfg.pyramid_levels
    x1 = np.asarray(x1, dtype=np.float32)
    x2 = np.asarray(x2, dtype=np.float32)
    if x1.shape != x2.shape:
        raise ShapeError(f"input frames differ in shape: {x1.shape} vs {x2.shape}")
    p1, rec = mirror_pad(x1, levels)
    p2, _ = mirror_pad(x2, levels)
    out = model(to_tensor(p1), to_tensor(p2), float(ratio), levels=levels)
    return unpad(to_numpy(out), rec)


def interpolate_sequence(model: Generator, x1, x2, ratios: Sequence[float], levels=None) -> list[np.ndarray]:
    return [synthesize_frame(model, x1, x2, r, levels) for r in ratios]


def two_stage_midpoint_schedule(model: Generator, x1, x2, levels=None) -> list[np.ndarray]:
    """Quarter/half/three-quarter frames via three midpoint syntheses."""
    mid = synthesize_frame(model, x1, x2, 0.5, levels)
    first = synthesize_frame(model, x1, mid, 0.5, levels)
    last = synthesize_frame(model, mid, x2, 0.5, levels)
    return [first, mid, last]


# ---------------------------------------------------------------------------
# predictors: callables mapping a TripletSample to a predicted target frame

Predictor = Callable[[TripletSample], np.ndarray]


class GeneratorPredictor:
    def __init__(self, model: Generator, levels: int | None = None):
        self.model = model
        self.levels = levels

    def __call__(self, s: TripletSample) -> np.ndarray:
        return synthesize_frame(self.model, s.x1, s.x2, s.ratio, self.levels)


def identity_oracle(s: TripletSample) -> np.ndarray:
    return s.x1


def average_oracle(s: TripletSample) -> np.ndarray:
    return (np.asarray(s.x1, np.float64) + s.x2) / 2


def ground_truth_oracle(s: TripletSample) -> np.ndarray:
    return s.xp


def nearest_input_oracle(s: TripletSample) -> np.ndarray:
    return s.x1 if abs(s.tp - s.t1) < abs(s.tp - s.t2) else s.x2


ORACLES = {
    "identity": identity_oracle,
    "average": average_oracle,
    "gt": ground_truth_oracle,
    "nearest": nearest_input_oracle,
}


def evaluation_triplets(video: VideoSequence, interval: int, ratio: float = 0.5) -> list[TripletSample]:
    """All frame triplets whose inputs are ``2*interval`` apart and whose target sits at ``ratio``.

    At ``ratio=0.5`` the target is ``interval`` frames from each input; other
    ratios must land on whole frames (e.g. 1.5 -> three frames past x1).
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    gap = 2 * interval
    offset = ratio * gap
    if abs(offset - round(offset)) > 1e-9:
        raise ValueError(f"ratio {ratio} does not land on a whole frame for interval {interval}")
    offset = int(round(offset))
    lo, hi = min(0, offset, gap), max(0, offset, gap)
    out = []
    for i in range(-lo, len(video) - hi):
        a, c, p = i, i + gap, i + offset
        ts = video.timestamps
        out.append(TripletSample(video.frames[a], video.frames[p], video.frames[c],
                                 int(ts[a]), int(ts[p]), int(ts[c])))
    return out


def _as_predictor(p, levels=None) -> Predictor:
    if isinstance(p, Generator):
        return GeneratorPredictor(p, levels)
    if isinstance(p, str):
        return ORACLES[p]
    return p


def evaluate_triplets(predictor, triplets: Iterable[TripletSample], levels=None) -> tuple[float, float]:
    predictor = _as_predictor(predictor, levels)
    ps, ss = [], []
    for s in triplets:
        pred = predictor(s)
        ps.append(psnr(pred, s.xp))
        ss.append(ssim(pred, s.xp))
    if not ps:
        raise EmptyEvaluationError("no valid triplet to evaluate")
    return float(np.mean(ps)), float(np.mean(ss))


def evaluate_dataset(predictor, corpus: Sequence[VideoSequence], interval: int, ratio: float = 0.5,
                     levels: int | None = None, max_triplets: int | None = None) -> tuple[float, float]:
    """Mean PSNR/SSIM over every valid triplet of the corpus (optionally an even subsample)."""
    triplets = [t for v in corpus for t in evaluation_triplets(v, interval, ratio)]
    if max_triplets and len(triplets) > max_triplets:
        idx = np.linspace(0, len(triplets) - 1, max_triplets).round().astype(int)
        triplets = [triplets[i] for i in idx]
    return evaluate_triplets(predictor, triplets, levels)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsRow:
    dataset: str
    interval: int
    ratio: float
    pyramid_levels: int
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow]

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f.name for f in fields(MetricsRow)])
        for r in self.rows:
            writer.writerow([r.dataset, r.interval, f"{r.ratio:g}", r.pyramid_levels,
                             "identical" if math.isinf(r.psnr) else f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_table(self) -> str:
        """Levels as rows, intervals as columns, cells ``PSNR/SSIM``."""
        levels = sorted({r.pyramid_levels for r in self.rows})
        intervals = sorted({r.interval for r in self.rows})
        cell = {(r.pyramid_levels, r.interval): r for r in self.rows}
        header = ["levels"] + [f"{i} frame{'s' if i > 1 else ''}" for i in intervals]
        lines = [header]
        for s in levels:
            line = [str(s)]
            for i in intervals:
                r = cell.get((s, i))
                if r is None:
                    line.append("-")
                else:
                    p = "inf" if math.isinf(r.psnr) else f"{r.psnr:.2f}"
                    line.append(f"{p}/{r.ssim:.2f}")
            lines.append(line)
        widths = [max(len(row[c]) for row in lines) for c in range(len(header))]
        return "\n".join("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in lines)


def depth_sweep(model: Generator, corpus, levels: Sequence[int], intervals: Sequence[int],
                ratio: float = 0.5, dataset: str = "synthetic", max_triplets: int | None = None) -> MetricsReport:
    """Evaluate one model at every listed pyramid depth and frame interval."""
    rows = []
    for s in levels:
        for k in intervals:
            p, q = evaluate_dataset(model, corpus, k, ratio, levels=s, max_triplets=max_triplets)
            rows.append(MetricsRow(dataset, k, ratio, s, p, q))
    return MetricsReport(rows)


# ---------------------------------------------------------------------------
# motion diagnostics


def square_centroid(frame, threshold: float = 0.5) -> tuple[float, float]:
    """(x, y) centroid of the pixels whose luminance exceeds ``threshold``."""
    mask = luminance(frame) > threshold
    if not mask.any():
        return math.nan, math.nan
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def strictly_monotonic(values: Sequence[float]) -> bool:
    d = np.diff(np.asarray(values, dtype=float))
    return bool(np.all(d > 0) or np.all(d < 0))
