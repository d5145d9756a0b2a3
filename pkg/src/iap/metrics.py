"""Attack-success and imperceptibility metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .localization import PatchRegion
from .model import VictimModel, attention_argmax, grad_cam

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SRE_CAP_DB = 99.0
WINDOW = 8


class DegenerateSignalError(ValueError):
    """SRE reference channel with zero mean."""


def attack_success_rate(outcomes) -> float:
    """Fraction of outcomes flagged successful (accepts outcomes or plain bools)."""
    flags = [o if isinstance(o, (bool, np.bool_)) else o.success for o in outcomes]
    if not flags:
        raise ValueError("ASR of an empty outcome set is undefined")
    return sum(bool(f) for f in flags) / len(flags)


def _windows(img: np.ndarray, window: int) -> np.ndarray:
    """(H, W, C) -> (C, nh, nw, window*window) stride-1 windows in float64."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {window}x{window} window")
    v = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(0, 1))
    return v.transpose(2, 0, 1, 3, 4).reshape(x.shape[2], v.shape[0], v.shape[1], window * window)


def _moments(a, b, window):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    wa, wb = _windows(a, window), _windows(b, window)
    ma, mb = wa.mean(axis=-1), wb.mean(axis=-1)
    da, db = wa - ma[..., None], wb - mb[..., None]
    va, vb = (da * da).mean(axis=-1), (db * db).mean(axis=-1)
    cov = (da * db).mean(axis=-1)
    return wa, wb, ma, mb, va, vb, cov


def ssim(a: np.ndarray, b: np.ndarray, window: int = WINDOW) -> float:
    """Mean SSIM over stride-1 uniform ``window`` x ``window`` blocks, averaged over channels.

    Population (1/N) moments, C1 = 0.01**2 and C2 = 0.03**2 for unit dynamic range.
    """
    _, _, ma, mb, va, vb, cov = _moments(a, b, window)
    num = (2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)
    return float((num / den).mean(axis=(1, 2)).mean())


def uiq(a: np.ndarray, b: np.ndarray, window: int = WINDOW) -> float:
    """Universal quality index ``4 cov ma mb / ((va + vb)(ma^2 + mb^2))`` over windows and channels.

    Windows where both inputs are flat (zero denominator) count as 1 if the
    two windows are identical and are skipped otherwise. Returns 0.0 when every
    window is skipped.
    """
    wa, wb, ma, mb, va, vb, cov = _moments(a, b, window)
    flat = (np.ptp(wa, axis=-1) == 0) & (np.ptp(wb, axis=-1) == 0)
    same = np.all(wa == wb, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = 4 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb))
    q = np.where(flat, 1.0, q)
    keep = ~flat | same
    if not keep.any():
        return 0.0
    return float(q[keep].mean())


def sre(a: np.ndarray, b: np.ndarray) -> float:
    """Signal to reconstruction error (dB) of ``b`` against reference ``a``, averaged over channels.

    Each channel is ``10 log10(mean(a)^2 / mse)``, capped at 99 dB (which is
    also the value for a zero-error channel).
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    vals = []
    for c in range(x.shape[-1]):
        mu = x[..., c].mean()
        if mu == 0:
            raise DegenerateSignalError(f"reference channel {c} has zero mean; SRE undefined")
        mse = ((x[..., c] - y[..., c]) ** 2).mean()
        vals.append(SRE_CAP_DB if mse == 0 else min(SRE_CAP_DB, 10 * np.log10(mu * mu / mse)))
    return float(np.mean(vals))


def crop(image: np.ndarray, region: PatchRegion) -> np.ndarray:
    rows, cols = region.bbox
    return np.asarray(image)[rows, cols]


def local_window(region: PatchRegion) -> int:
    return max(1, min(WINDOW, region.h, region.w))


def image_metrics(original: np.ndarray, adversarial: np.ndarray, region: PatchRegion) -> dict:
    """SSIM/UIQ/SRE on the full image and on the patch bounding box.

    Patches narrower than the 8-pixel window use a window equal to the patch side.
    """
    lo, la = crop(original, region), crop(adversarial, region)
    lw = local_window(region)
    out = {
        "ssim_local": ssim(lo, la, lw),
        "ssim_global": ssim(original, adversarial),
        "uiq_local": uiq(lo, la, lw),
        "uiq_global": uiq(original, adversarial),
    }
    for scale, (ref, test) in (("local", (lo, la)), ("global", (original, adversarial))):
        try:
            out[f"sre_{scale}"] = sre(ref, test)
        except DegenerateSignalError:
            out[f"sre_{scale}"] = None
    return out


def attention_outside_patch(model: VictimModel, adversarial: np.ndarray, region: PatchRegion) -> bool:
    pred = int(model.predict(adversarial))
    row, col = attention_argmax(grad_cam(model, adversarial, pred))
    return not region.contains(row, col)


def no_patch_loc(model: VictimModel, outcomes) -> float:
    """Fraction of adversarial samples whose Grad-CAM peak (predicted class) lies outside the patch."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("NoPatchLoc of an empty outcome set is undefined")
    return sum(attention_outside_patch(model, o.adversarial, o.region) for o in outcomes) / len(outcomes)


@dataclass
class MetricsReport:
    asr: float
    rows: list = field(default_factory=list)
    aggregates: dict | None = None
    no_patch_loc: float | None = None


def evaluate(model: VictimModel | None, originals: Sequence[np.ndarray], outcomes, ids: Sequence[str]) -> MetricsReport:
    """Per-image rows plus aggregates; NoPatchLoc is over successful outcomes and needs ``model``."""
    from .data import ResultRecord, aggregate

    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    rows = []
    for k in order:
        o = outcomes[k]
        m = image_metrics(originals[k], o.adversarial, o.region)
        rows.append(ResultRecord(
            id=ids[k], anchor_row=int(o.anchor[0]), anchor_col=int(o.anchor[1]), success=bool(o.success),
            confidence=float(o.final_confidence), iterations=int(o.iterations_used), reinits=int(o.reinits_used), **m,
        ))
    wins = [outcomes[k] for k in order if outcomes[k].success]
    npl = no_patch_loc(model, wins) if (model is not None and wins) else None
    return MetricsReport(attack_success_rate(outcomes), rows, aggregate(rows), npl)
