"""Batch orchestration shared by the CLI and the acceptance suite.

Work is split into fixed-size chunks before it is handed to the worker pool,
so the set of images processed together (and therefore every floating-point
result) never depends on the number of workers.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .config import ABLATION_AXES
from .attack import AttackConfig, iap_attack_batch, lavan_style_attack_batch, mpgd_attack_batch
from .data import LabeledImage
from .metrics import image_metrics, no_patch_loc
from .model import VictimModel

log = logging.getLogger(__name__)


def target_for(label: int, target: int, class_count: int) -> int:
    """A fixed target class, or ``(label + 1) mod K`` when ``target`` is negative."""
    return (label + 1) % class_count if target < 0 else target


def select_images(model: VictimModel, items: Sequence[LabeledImage], target: int, limit: int):
    """First ``limit`` items the model classifies correctly and whose label differs from the target.

    Returns ``(selected, targets, skipped_ids)``.
    """
    chosen, targets, skipped = [], [], []
    batch = 256
    for start in range(0, len(items), batch):
        part = items[start : start + batch]
        pred = model.predict(np.stack([it.image for it in part]))
        for it, p in zip(part, pred):
            if len(chosen) >= limit:
                return chosen, targets, skipped
            t = target_for(it.label, target, model.class_count)
            if int(p) != it.label or t == it.label:
                skipped.append(it.id)
                continue
            chosen.append(it)
            targets.append(t)
    return chosen, targets, skipped


def chunked(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def run_chunks(fn: Callable, jobs: list, workers: int = 1) -> list:
    """Apply ``fn`` to every job, in a process pool when ``workers > 1``; order is preserved."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _iap_job(job):
    model, x, y, t, cfg = job
    return iap_attack_batch(model, x, y, t, cfg)


def _mpgd_job(job):
    model, x, y, t, regions, kw = job
    return mpgd_attack_batch(model, x, y, t, regions, **kw)


def _lavan_job(job):
    model, x, y, t, regions, kw = job
    return lavan_style_attack_batch(model, x, y, t, regions, **kw)


def _flatten(parts):
    return [o for part in parts for o in part]


def attack_images(model, images, labels, targets, config: AttackConfig, chunk: int = 25, workers: int = 1):
    x = np.asarray(images, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    t = np.asarray(targets, dtype=np.int64)
    jobs = [(model, x[s], y[s], t[s], config) for s in chunked(len(x), chunk)]
    return _flatten(run_chunks(_iap_job, jobs, workers))


def baseline_images(kind: str, model, images, labels, targets, regions, chunk: int = 25, workers: int = 1, **kw):
    """Run the ``mpgd`` or ``lavan`` baseline on precomputed patch regions."""
    fn = {"mpgd": _mpgd_job, "lavan": _lavan_job}[kind]
    x = np.asarray(images, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    t = np.asarray(targets, dtype=np.int64)
    jobs = [(model, x[s], y[s], t[s], list(regions[s]), kw) for s in chunked(len(x), chunk)]
    return _flatten(run_chunks(fn, jobs, workers))


def metric_rows(originals, outcomes) -> list[dict | None]:
    """Per-image metric dicts; ``None`` for unsuccessful outcomes."""
    return [image_metrics(x, o.adversarial, o.region) if o.success else None for x, o in zip(originals, outcomes)]


def summarize(originals, outcomes, model: VictimModel | None = None) -> dict:
    """ASR, mean metrics over successful outcomes, mean iterations and NoPatchLoc."""
    rows = [r for r in metric_rows(originals, outcomes) if r is not None]
    out = {
        "n": len(outcomes),
        "asr": sum(o.success for o in outcomes) / len(outcomes) if outcomes else float("nan"),
        "mean_iterations": float(np.mean([o.iterations_used for o in outcomes])) if outcomes else float("nan"),
    }
    for key in ("ssim_local", "ssim_global", "uiq_local", "uiq_global", "sre_local", "sre_global"):
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    wins = [o for o in outcomes if o.success]
    out["no_patch_loc"] = no_patch_loc(model, wins) if (model is not None and wins) else None
    return out


def sweep(model, items: Sequence[LabeledImage], targets, run_config, axis: str, values, chunk: int = 25,
          workers: int = 1, with_npl: bool = False) -> list[dict]:
    """Attack the same images once per swept value, all other settings fixed; one summary row per value."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    field_name = ABLATION_AXES[axis][0]
    x = np.stack([it.image for it in items])
    y = np.array([it.label for it in items])
    rows = []
    for value in values:
        cfg = dataclasses.replace(run_config, **{field_name: value})
        acfg = cfg.attack_config(x.shape[1:3])
        log.info("ablate %s=%s (%d images)", axis, value, len(items))
        outcomes = attack_images(model, x, y, targets, acfg, chunk, workers)
        row = {"axis": axis, "value": value, "patch_side": acfg.patch_w}
        row.update(summarize(x, outcomes, model if with_npl else None))
        rows.append(row)
    return rows
