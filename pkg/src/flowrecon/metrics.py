"""Image and segmentation quality metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from flowrecon.grid import VectorField2
from flowrecon.mask import DomainMask, detect_edges


def _pair(a: VectorField2, b: VectorField2):
    if a.spec != b.spec:
        raise ValueError("fields live on different grids")
    return a.channels, b.channels


def _mask_array(m) -> np.ndarray:
    return np.asarray(m.inside if isinstance(m, DomainMask) else m, dtype=bool)


def relative_error(u_star: VectorField2, u_gt: VectorField2, gt_mask) -> float:
    """Aggregate squared-error ratio over the ground-truth domain."""
    a, b = _pair(u_star, u_gt)
    m = _mask_array(gt_mask)
    energy = np.sum(b[:, m] ** 2)
    if energy == 0:
        raise ValueError("ground truth has zero energy inside the mask")
    return float(np.sum((a[:, m] - b[:, m]) ** 2) / energy)


def mse(u_star: VectorField2, u_gt: VectorField2, mask=None) -> float:
    a, b = _pair(u_star, u_gt)
    d = (a - b) ** 2
    if mask is not None:
        d = d[:, _mask_array(mask)]
    return float(np.mean(d))


def psnr(u_star: VectorField2, u_gt: VectorField2, mask=None) -> float:
    """``10 log10(peak^2 / MSE)`` with peak the largest absolute ground-truth component.

    Returns ``inf`` for identical images.
    """
    err = mse(u_star, u_gt, mask)
    peak = float(np.max(np.abs(u_gt.channels)))
    if err == 0:
        return math.inf
    if peak == 0:
        return -math.inf
    return 10.0 * math.log10(peak**2 / err)


def ssim(u_star: VectorField2, u_gt: VectorField2) -> float:
    """Mean structural similarity of the speed images (11x11 Gaussian window, sigma 1.5)."""
    _pair(u_star, u_gt)
    x = u_star.speed()
    y = u_gt.speed()
    L = float(y.max() - y.min())
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2

    def blur(img):
        # truncate=3.5 gives radius 5, an 11x11 support
        return ndimage.gaussian_filter(img, 1.5, mode="reflect", truncate=3.5)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return float(np.mean(s))


def dice(mask_a, mask_b) -> float:
    a, b = _mask_array(mask_a), _mask_array(mask_b)
    total = a.sum() + b.sum()
    if total == 0:
        raise ValueError("both masks are empty")
    return float(2.0 * np.sum(a & b) / total)


def hd95(mask_a: DomainMask, mask_b: DomainMask) -> float:
    """95th percentile of symmetric edge-to-edge distances, in pixels."""
    if mask_a.spec != mask_b.spec:
        raise ValueError("masks live on different grids")
    ea = np.argwhere(detect_edges(mask_a))
    eb = np.argwhere(detect_edges(mask_b))
    da = cKDTree(eb).query(ea)[0]
    db = cKDTree(ea).query(eb)[0]
    return float(np.percentile(np.concatenate([da, db]), 95))


def mask_mse(mask_a, mask_b) -> float:
    a, b = _mask_array(mask_a), _mask_array(mask_b)
    return float(np.mean((a.astype(float) - b.astype(float)) ** 2))


@dataclass
class EvalReport:
    re: float
    mse: float
    psnr: float
    ssim: float
    mask_mse: float
    dice: float
    hd95: float
    mse_in_mask: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["psnr_infinite"] = math.isinf(self.psnr)
        if math.isinf(self.psnr):
            d["psnr"] = None
        return json.dumps(d, indent=2)

    def csv_row(self, header: bool = True) -> str:
        buf = io.StringIO()
        d = asdict(self)
        w = csv.DictWriter(buf, fieldnames=list(d), lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(d)
        return buf.getvalue()


def evaluate(pred: VectorField2, gt: VectorField2, pred_mask: DomainMask, gt_mask: DomainMask) -> EvalReport:
    return EvalReport(
        re=relative_error(pred, gt, gt_mask),
        mse=mse(pred, gt),
        psnr=psnr(pred, gt),
        ssim=ssim(pred, gt),
        mask_mse=mask_mse(pred_mask, gt_mask),
        dice=dice(pred_mask, gt_mask),
        hd95=hd95(pred_mask, gt_mask),
        mse_in_mask=mse(pred, gt, gt_mask),
    )
