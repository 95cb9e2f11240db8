"""Image quality metrics: PSNR and SSIM against a reference, SNR and CNR from ROI statistics."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import io as pio

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRICS = ("psnr", "ssim", "snr", "cnr")


class MetricWarning(UserWarning):
    """A sentinel value (+inf or -inf) was produced or dropped from an aggregate."""


class RoiError(ValueError):
    pass


class UsageError(ValueError):
    pass


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, ref, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give +inf."""
    a, b = _pair(x, ref)
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        warnings.warn("psnr: zero MSE, returning +inf", MetricWarning, stacklevel=2)
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, ref, peak: float = 1.0) -> float:
    """Mean SSIM over every full 11x11 window (no padding)."""
    a, b = _pair(x, ref)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = gaussian_window()

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(np.mean(smap))


# ---------------------------------------------------------------- ROIs


Box = tuple  # (x, y, w, h): column, row, width, height


@dataclass
class RoiSet:
    signal: list
    background: Box

    def __post_init__(self):
        self.signal = [tuple(int(v) for v in b) for b in self.signal]
        self.background = tuple(int(v) for v in self.background)
        for b in self.signal + [self.background]:
            if len(b) != 4:
                raise RoiError(f"box {b} must be [x, y, w, h]")
        if not self.signal:
            raise RoiError("RoiSet needs at least one signal box")

    @classmethod
    def from_dict(cls, d: dict) -> "RoiSet":
        try:
            return cls(d["signal"], d["background"])
        except (KeyError, TypeError) as exc:
            raise RoiError(f"RoiSet JSON needs 'signal' and 'background': {exc}") from exc

    @classmethod
    def load(cls, path) -> "RoiSet":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise RoiError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        return {"signal": [list(b) for b in self.signal], "background": list(self.background)}

    def validate(self, shape) -> None:
        h, w = shape
        for b in self.signal + [self.background]:
            x, y, bw, bh = b
            if bw < 2 or bh < 2:
                raise RoiError(f"box {b} is degenerate (w, h must be >= 2)")
            if x < 0 or y < 0 or x + bw > w or y + bh > h:
                raise RoiError(f"box {b} lies outside the {h}x{w} image")
        for b in self.signal:
            if _overlap(b, self.background):
                raise RoiError(f"signal box {b} overlaps background box {self.background}")


def _overlap(a: Box, b: Box) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def _crop(img: np.ndarray, b: Box) -> np.ndarray:
    x, y, w, h = b
    return img[y : y + h, x : x + w]


def snr(img, rois: RoiSet) -> float:
    """20 log10(mean of signal-box means / background std); std uses n - 1."""
    a = np.asarray(img, dtype=np.float64)
    rois.validate(a.shape)
    mean_of_means = float(np.mean([_crop(a, b).mean() for b in rois.signal]))
    if mean_of_means < 0:
        raise RoiError(f"snr: mean of signal means is negative ({mean_of_means}); check ROI placement")
    sigma_b = float(np.std(_crop(a, rois.background), ddof=1))
    if sigma_b == 0.0:
        warnings.warn("snr: background std is zero, returning +inf", MetricWarning, stacklevel=2)
        return math.inf
    if mean_of_means == 0.0:
        warnings.warn("snr: signal mean is zero, returning -inf", MetricWarning, stacklevel=2)
        return -math.inf
    return 20.0 * math.log10(mean_of_means / sigma_b)


def cnr(img, rois: RoiSet) -> float:
    """20 log10 of the mean over signal boxes of |mu_i - mu_b| / sqrt(sigma_i^2 + sigma_b^2)."""
    a = np.asarray(img, dtype=np.float64)
    rois.validate(a.shape)
    bg = _crop(a, rois.background)
    mu_b, var_b = float(bg.mean()), float(np.var(bg, ddof=1))
    ratios = []
    for b in rois.signal:
        s = _crop(a, b)
        num = abs(float(s.mean()) - mu_b)
        den = math.sqrt(float(np.var(s, ddof=1)) + var_b)
        if den == 0.0:
            if num == 0.0:
                continue  # undefined ratio; this box carries no information
            warnings.warn("cnr: zero variance with nonzero contrast, returning +inf", MetricWarning, stacklevel=2)
            return math.inf
        ratios.append(num / den)
    if not ratios:
        raise RoiError("cnr: every ROI pair has zero denominator")
    value = float(np.mean(ratios))
    if value == 0.0:
        warnings.warn("cnr: no contrast between signal and background, returning -inf", MetricWarning, stacklevel=2)
        return -math.inf
    return 20.0 * math.log10(value)


def auto_rois(clean, n: int = 4, side: int = 3, empty_frac: float = 0.02) -> RoiSet:
    """Place ``n`` signal boxes on the brightest well-separated foreground blobs and one background box.

    Signal boxes are centred on successive maxima of the lightly smoothed
    clean image, with a suppression radius that keeps them apart. The
    background box is the largest empty square found inside any of the four
    quadrants.
    """
    img = np.asarray(clean, dtype=np.float64)
    h, w = img.shape
    peak = float(img.max())
    if peak <= 0:
        raise RoiError("auto_rois: reference image is empty")
    smooth = ndimage.uniform_filter(img, size=side, mode="constant")
    half = side // 2
    avail = np.zeros_like(smooth, dtype=bool)
    avail[half : h - side + half + 1, half : w - side + half + 1] = True
    score = np.where(avail, smooth, -np.inf)
    sep = max(2 * side, min(h, w) // 8)
    signal = []
    while len(signal) < n:
        idx = int(np.argmax(score))
        cy, cx = divmod(idx, w)
        if not np.isfinite(score[cy, cx]) or score[cy, cx] <= empty_frac * peak:
            raise RoiError(f"auto_rois: found only {len(signal)} separated foreground blobs, need {n}")
        signal.append((cx - half, cy - half, side, side))
        score[max(cy - sep, 0) : cy + sep + 1, max(cx - sep, 0) : cx + sep + 1] = -np.inf

    empty = img <= empty_frac * peak
    for b in signal:
        x, y, bw, bh = b
        empty[max(y - 1, 0) : y + bh + 1, max(x - 1, 0) : x + bw + 1] = False
    best = None
    for qy in (0, h // 2):
        for qx in (0, w // 2):
            sub = np.pad(empty[qy : qy + (h + 1) // 2, qx : qx + (w + 1) // 2], 1, constant_values=False)
            dist = ndimage.distance_transform_cdt(sub, metric="chessboard")
            r = int(dist.max())
            if r < 2:
                continue
            yy, xx = np.unravel_index(int(np.argmax(dist)), dist.shape)
            size = 2 * r - 1
            box = (qx + xx - 1 - (r - 1), qy + yy - 1 - (r - 1), size, size)
            if best is None or size > best[2]:
                best = box
    if best is None:
        raise RoiError("auto_rois: no empty background region of at least 3x3 pixels")
    rois = RoiSet(signal, best)
    rois.validate(img.shape)
    return rois


# ---------------------------------------------------------------- reports


def _aggregate(values: Sequence[float], name: str) -> dict:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    dropped = sum(1 for v in values if v is not None and not math.isfinite(v))
    if dropped:
        warnings.warn(f"{name}: {dropped} infinite value(s) excluded from the aggregate", MetricWarning, stacklevel=3)
    if not finite:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(finite)
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(np.mean(arr)), "std": std, "n": len(arr)}


def _json_num(v):
    if v is None or math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


@dataclass
class MetricReport:
    rows: list
    metrics: tuple
    group_by_level: bool = False
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.recompute()

    def groups(self) -> list[str]:
        if not self.group_by_level:
            return ["all"]
        present = {r.get("level") for r in self.rows}
        order = ["low", "mid", "high"]
        return [g for g in order if g in present] + sorted(str(g) for g in present - set(order))

    def recompute(self) -> dict:
        out = {}
        for g in self.groups():
            rows = self.rows if g == "all" else [r for r in self.rows if str(r.get("level")) == g]
            out[g] = {m: _aggregate([r.get(m) for r in rows], m) for m in self.metrics}
        return out

    def to_dict(self) -> dict:
        rows = [{k: (_json_num(v) if isinstance(v, float) else v) for k, v in r.items()} for r in self.rows]
        return {"metrics": list(self.metrics), "group_by_level": self.group_by_level, "rows": rows,
                "aggregates": self.aggregates}

    def save(self, path) -> None:
        pio.dump_json(path, self.to_dict())

    def table(self) -> str:
        header = ["group", "n"] + [m.upper() for m in self.metrics]
        lines = [header]
        for g, agg in self.aggregates.items():
            n = max((a["n"] for a in agg.values()), default=0)
            cells = [g, str(n)]
            for m in self.metrics:
                a = agg[m]
                cells.append("n/a" if a["mean"] is None else f"{a['mean']:.4f}±{a['std']:.4f}")
            lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in lines)


RoiSource = Union[None, str, RoiSet, Callable]


def evaluate(manifest, model: Optional[Callable] = None, rois: RoiSource = None, group_by_level: bool = False,
             predictions: Optional[Sequence] = None) -> MetricReport:
    """Score each manifest row's output image (model(noisy), given predictions, or the noisy input itself).

    ``model`` maps an (N, H, W) array to an (N, H, W) array. ``rois`` is a
    RoiSet used for every image, ``"auto"`` to place boxes on each clean
    reference, or a callable ``row -> RoiSet``.
    """
    rows = pio.read_dataset_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    has_ref = all(r.get("clean_path") for r in rows)
    if not has_ref and rois is None:
        raise UsageError("evaluation needs clean references or an ROI set (neither given)")
    if rois == "auto" and not has_ref:
        raise UsageError("automatic ROI placement needs clean references")
    if predictions is not None and len(predictions) != len(rows):
        raise UsageError(f"{len(predictions)} predictions for {len(rows)} manifest rows")
    metrics = (("psnr", "ssim") if has_ref else ()) + (("snr", "cnr") if rois is not None else ())

    out_rows = []
    for i, row in enumerate(rows):
        noisy = pio.read_pgm(row["noisy_path"])
        if predictions is not None:
            out = np.asarray(predictions[i], dtype=np.float64)
        elif model is not None:
            out = np.asarray(model(noisy[None]))[0]
        else:
            out = noisy
        rec = {"image": Path(row["noisy_path"]).name, "level": row.get("level")}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            if has_ref:
                clean = pio.read_pgm(row["clean_path"])
                rec["psnr"] = psnr(out, clean)
                rec["ssim"] = ssim(out, clean)
            if rois is not None:
                if rois == "auto":
                    rs = auto_rois(clean)
                elif isinstance(rois, RoiSet):
                    rs = rois
                else:
                    rs = rois(row)
                rec["snr"] = snr(out, rs)
                rec["cnr"] = cnr(out, rs)
                rec["rois"] = rs.to_dict()
        out_rows.append(rec)
    return MetricReport(out_rows, metrics, group_by_level)
