"""Patch attacks: the perceptibility-aware IAP loop, its black-box NES variant,
and the masked-PGD and LaVAN-style baselines.

Every attack is implemented over a batch of images with per-image state so a
whole evaluation set can share forward/backward passes; the single-image entry
points are thin wrappers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import DTYPE, EngineError, backward_to_input, forward, softmax, softmax_cross_entropy
from .localization import PatchRegion, find_optimal_location, make_mask, priority_field
from .model import VictimModel, grad_cam
from .perceptibility import SensitivityMap, perceptual_distance, perceptual_distance_gradient, sensitivity_map

log = logging.getLogger(__name__)

ZERO_LIFT = 1.0 / 255.0


class AttackError(ValueError):
    pass


class QueryBudgetExceeded(RuntimeError):
    pass


@dataclass
class AttackConfig:
    w1: float = 1.0
    w2: float = 0.0
    w3: float = 0.3
    eta: float = 2.0
    s: float = 0.9
    T: int = 1000
    reinit_limit: int = 3
    reinit_factor: float = 0.5
    stride: int = 1
    patch_w: int = 12
    patch_h: int = 12
    shape: str = "rect"
    seed: int = 0
    lam: float = 1e-4
    window_radius: int = 1
    cam_resize: str = "bilinear"
    update_rule: str = "iap"  # "iap" or "adam"
    adam_lr: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def validate(self) -> "AttackConfig":
        if self.eta <= 0:
            raise AttackError("eta must be > 0")
        if not 0 < self.s <= 1:
            raise AttackError("confidence threshold s must lie in (0, 1]")
        if self.T < 1:
            raise AttackError("T must be >= 1")
        if self.reinit_limit < 0:
            raise AttackError("reinit_limit must be >= 0")
        if self.stride < 1:
            raise AttackError("stride must be >= 1")
        if self.update_rule not in ("iap", "adam"):
            raise AttackError(f"unknown update rule {self.update_rule!r}")
        return self


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    success: bool
    final_confidence: float
    iterations_used: int
    reinits_used: int
    anchor: tuple[int, int]
    region: PatchRegion
    target: int = -1
    predicted: int = -1
    queries: int = 0
    extra: dict = field(default_factory=dict)


def compose(original: np.ndarray, delta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paste ``delta`` into ``original`` where ``mask`` is set (channels broadcast)."""
    return np.where(mask[..., None], delta, original).astype(DTYPE)


def _class_terms(model: VictimModel, images, y, y_targ, w1: float, w2: float):
    """Cross-entropy part of the total loss and its input gradient, batched."""
    logits, cache = forward(model.layers, images)
    ce_t, g_t = softmax_cross_entropy(logits, y_targ)
    ce_y, g_y = softmax_cross_entropy(logits, y)
    loss = w1 * ce_t - w2 * ce_y
    grad = backward_to_input(model.layers, cache, w1 * g_t - w2 * g_y)
    return loss, grad, softmax(logits)


def total_loss(model: VictimModel, original, adversarial, y: int, y_targ: int, region: PatchRegion,
               sens: SensitivityMap, weights=(1.0, 1.0, 7.0)) -> tuple[float, np.ndarray]:
    """``w1*CE(x_adv, y_targ) - w2*CE(x_adv, y) + w3*D(x, x_adv)`` and its gradient inside the patch."""
    w1, w2, w3 = weights
    k = model.class_count
    if not (0 <= y < k and 0 <= y_targ < k):
        raise EngineError(f"class out of range for {k} classes")
    ce, grad, _ = _class_terms(model, np.asarray(adversarial, dtype=DTYPE), y, y_targ, w1, w2)
    loss = float(ce)
    if w3:
        loss += w3 * perceptual_distance(original, adversarial, region, sens)
        grad = grad + w3 * perceptual_distance_gradient(original, adversarial, region, sens)
    return loss, np.where(region.mask[..., None], grad, 0).astype(DTYPE)


def update_step(delta: np.ndarray, grad: np.ndarray, sens, eta: float) -> np.ndarray:
    """Color-preserving multiplicative step.

    The gradient is averaged over channels and every channel of a pixel is
    scaled by the same factor ``1 - eta * gbar / Sens``, so channel ratios (the
    pixel's hue) survive until the final clip to [0, 1]. ``sens`` may carry
    leading batch dimensions matching ``delta``.
    """
    s = np.asarray(getattr(sens, "values", sens), dtype=np.float64)
    if np.any(s <= 0):
        raise AttackError("sensitivity map must be strictly positive")
    delta = np.asarray(delta, dtype=DTYPE)
    if grad.shape != delta.shape:
        raise AttackError(f"gradient shape {grad.shape} != delta shape {delta.shape}")
    gbar = np.asarray(grad, dtype=np.float64).mean(axis=-1)
    factor = (1.0 - eta * gbar / s).astype(DTYPE)
    return np.clip(delta * factor[..., None], 0.0, 1.0)


def lift_zeros(x: np.ndarray) -> np.ndarray:
    return np.where(x == 0, DTYPE(ZERO_LIFT), x).astype(DTYPE)


def localize(model: VictimModel, image: np.ndarray, y: int, config: AttackConfig):
    """Grad-CAM / sensitivity priority search; returns (region, sens, field)."""
    cam = grad_cam(model, image, y, config.cam_resize)
    sens = sensitivity_map(image, config.lam, config.window_radius)
    field_ = priority_field(cam, sens, config.patch_w, config.patch_h, config.shape)
    anchor = find_optimal_location(field_, config.stride)
    region = make_mask(anchor, config.patch_w, config.patch_h, image.shape, config.shape)
    return region, sens, field_


def _as_batch(images, labels):
    x = np.asarray(images, dtype=DTYPE)
    if x.ndim == 3:
        x = x[None]
    return x, np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x),)).copy()


def _gate(probs: np.ndarray, targets: np.ndarray, s: float, targeted: bool = True) -> np.ndarray:
    pred = probs.argmax(axis=-1)
    rows = np.arange(len(probs))
    if targeted:
        return (probs[rows, targets] >= s) & (pred == targets)
    # untargeted: true-class confidence has dropped and the label flipped
    return (probs[rows, targets] <= 1 - s) & (pred != targets)


def _check_inputs(model, x, ys, targets, require_correct=True):
    k = model.class_count
    if np.any((ys < 0) | (ys >= k)) or np.any((targets < 0) | (targets >= k)):
        raise AttackError(f"class labels out of range for {k} classes")
    if np.any(ys == targets):
        raise AttackError("target class must differ from the true class")
    if require_correct:
        pred = model.predict(x)
        bad = np.flatnonzero(pred != ys)
        if len(bad):
            raise AttackError(f"input(s) {bad.tolist()} are not classified as their true label")


def iap_attack_batch(model: VictimModel, images, ys, targets, config: AttackConfig | None = None,
                     regions: list[PatchRegion] | None = None) -> list[AttackOutcome]:
    """Invisible adversarial patch attack over a batch of images.

    Per image: pick the anchor maximising the localization/sensitivity window
    score, start the patch from the clean pixels, and apply the
    color-preserving update (or Adam, for ablations) to the regularised
    targeted loss until the target confidence reaches ``s``. An attempt that
    exhausts ``T`` steps restarts from the clean patch with ``eta`` scaled by
    ``reinit_factor``, at most ``reinit_limit`` times.
    """
    config = (config or AttackConfig()).validate()
    x, ys = _as_batch(images, ys)
    _, targets = _as_batch(images, targets)
    _check_inputs(model, x, ys, targets)
    n = len(x)
    sens_list, region_list = [], []
    for k in range(n):
        if regions is None:
            region, sens, _ = localize(model, x[k], int(ys[k]), config)
        else:
            region = regions[k]
            sens = sensitivity_map(x[k], config.lam, config.window_radius)
        region_list.append(region)
        sens_list.append(sens)
    masks = np.stack([r.mask for r in region_list])
    sens_all = np.stack([s.values for s in sens_list])
    areas = np.array([max(r.area, 1) for r in region_list], dtype=np.float64)
    delta0 = np.where(masks[..., None], lift_zeros(x), x).astype(DTYPE)
    delta = delta0.copy()
    eta = np.full(n, config.eta)
    step_in_attempt = np.zeros(n, dtype=np.int64)
    iterations = np.zeros(n, dtype=np.int64)
    reinits = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    conf = np.zeros(n)
    adam_m = np.zeros_like(delta)
    adam_v = np.zeros_like(delta)
    b1, b2 = config.adam_betas
    empty = masks.reshape(n, -1).sum(axis=1) == 0

    while not done.all():
        idx = np.flatnonzero(~done)
        xa = compose(x[idx], delta[idx], masks[idx])
        loss, grad, probs = _class_terms(model, xa, ys[idx], targets[idx], config.w1, config.w2)
        conf[idx] = probs[np.arange(len(idx)), targets[idx]]
        hit = _gate(probs, targets[idx], config.s)
        success[idx[hit]] = True
        done[idx[hit]] = True
        exhausted = ~hit & ((step_in_attempt[idx] >= config.T) | empty[idx])
        for k in idx[exhausted]:
            if reinits[k] < config.reinit_limit and not empty[k]:
                reinits[k] += 1
                eta[k] *= config.reinit_factor
                delta[k] = delta0[k]
                adam_m[k] = 0
                adam_v[k] = 0
                step_in_attempt[k] = 0
            else:
                done[k] = True
        upd = ~hit & ~done[idx]
        if not upd.any():
            continue
        rows = idx[upd]
        g = grad[upd].astype(np.float64)
        if config.w3:
            sign = np.sign(xa[upd].astype(np.float64) - x[rows])
            scale = np.where(masks[rows], sens_all[rows], 0.0) / (areas[rows, None, None] * x.shape[-1])
            g = g + config.w3 * scale[..., None] * sign
        g = np.where(masks[rows][..., None], g, 0.0)
        if config.update_rule == "iap":
            for j, k in enumerate(rows):
                delta[k] = update_step(delta[k], g[j].astype(DTYPE), sens_all[k], eta[k])
        else:
            t = (step_in_attempt[rows] + 1).astype(np.float64)[:, None, None, None]
            adam_m[rows] = b1 * adam_m[rows] + (1 - b1) * g
            adam_v[rows] = b2 * adam_v[rows] + (1 - b2) * g * g
            mhat = adam_m[rows] / (1 - b1**t)
            vhat = adam_v[rows] / (1 - b2**t)
            lr = (config.adam_lr * eta[rows] / config.eta)[:, None, None, None]
            step = lr * mhat / (np.sqrt(vhat) + 1e-8)
            delta[rows] = np.clip(delta[rows] - np.where(masks[rows][..., None], step, 0), 0, 1).astype(DTYPE)
        step_in_attempt[rows] += 1
        iterations[rows] += 1

    outcomes = []
    for k in range(n):
        adv = compose(x[k], delta[k], masks[k])
        pred = int(model.predict(adv))
        outcomes.append(AttackOutcome(
            adv, bool(success[k]), float(conf[k]), int(iterations[k]), int(reinits[k]),
            region_list[k].anchor, region_list[k], int(targets[k]), pred,
        ))
    return outcomes


def iap_attack(model: VictimModel, image, y: int, y_targ: int, config: AttackConfig | None = None,
               region: PatchRegion | None = None) -> AttackOutcome:
    return iap_attack_batch(model, image, y, y_targ, config, None if region is None else [region])[0]


# -- baselines --------------------------------------------------------------------------


def _sign_or_plain_loop(model, x, ys, targets, regions, delta, steps, step, s, w2, project=None, use_sign=True,
                        early_stop=False):
    n = len(x)
    masks = np.stack([r.mask for r in regions])[..., None]
    done = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    conf = np.zeros(n)
    for it in range(steps + 1):
        idx = np.flatnonzero(~done)
        if len(idx) == 0:
            break
        xa = np.where(masks[idx], delta[idx], x[idx]).astype(DTYPE)
        _, grad, probs = _class_terms(model, xa, ys[idx], targets[idx], 1.0, w2)
        conf[idx] = probs[np.arange(len(idx)), targets[idx]]
        hit = _gate(probs, targets[idx], s)
        success[idx] = hit
        if early_stop:
            done[idx[hit]] = True
        else:
            hit = np.zeros_like(hit)
        if it == steps:
            break
        rows = idx[~hit]
        g = grad[~hit]
        move = np.sign(g) if use_sign else g
        new = delta[rows] - step * np.where(masks[rows], move, 0)
        if project is not None:
            new = project(new, x[rows])
        delta[rows] = np.clip(new, 0, 1).astype(DTYPE)
        iterations[rows] += 1
    outcomes = []
    for k in range(n):
        adv = np.where(masks[k], delta[k], x[k]).astype(DTYPE)
        outcomes.append(AttackOutcome(
            adv, bool(success[k]), float(conf[k]), int(iterations[k]), 0, regions[k].anchor, regions[k],
            int(targets[k]), int(model.predict(adv)),
        ))
    return outcomes


def mpgd_attack_batch(model, images, ys, targets, regions, epsilon: float = 16 / 255, steps: int = 200,
                      step_size: float = 1 / 255, s: float = 0.9, early_stop: bool = False) -> list[AttackOutcome]:
    """Masked L-inf PGD: signed steps on the targeted cross-entropy, projected to the ``epsilon`` ball.

    Like standard PGD it runs all ``steps`` and judges success on the final
    iterate unless ``early_stop`` is set.
    """
    x, ys = _as_batch(images, ys)
    _, targets = _as_batch(images, targets)
    _check_inputs(model, x, ys, targets)
    if epsilon < 0:
        raise AttackError("epsilon must be >= 0")

    def project(new, orig):
        return np.clip(new, orig - epsilon, orig + epsilon)

    return _sign_or_plain_loop(model, x, ys, targets, regions, x.copy(), steps, step_size, s, 0.0, project,
                               early_stop=early_stop)


def mpgd_attack(model, image, y, y_targ, region, epsilon=16 / 255, steps=200, step_size=1 / 255, s=0.9,
                early_stop=False):
    return mpgd_attack_batch(model, image, y, y_targ, [region], epsilon, steps, step_size, s, early_stop)[0]


def lavan_style_attack_batch(model, images, ys, targets, regions, steps: int = 1000, step_size: float = 1.0,
                             s: float = 0.9, seed: int = 0, w2: float = 0.0,
                             early_stop: bool = False) -> list[AttackOutcome]:
    """Unbounded patch from seeded uniform noise; plain gradient descent on ``CE(y_targ) - w2*CE(y)``."""
    x, ys = _as_batch(images, ys)
    _, targets = _as_batch(images, targets)
    _check_inputs(model, x, ys, targets)
    rng = np.random.default_rng(seed)
    masks = np.stack([r.mask for r in regions])[..., None]
    noise = rng.uniform(0, 1, size=x.shape).astype(DTYPE)
    delta = np.where(masks, noise, x).astype(DTYPE)
    return _sign_or_plain_loop(model, x, ys, targets, regions, delta, steps, step_size, s, w2, use_sign=False,
                               early_stop=early_stop)


def lavan_style_attack(model, image, y, y_targ, region, steps=1000, step_size=1.0, s=0.9, seed=0, w2=0.0,
                       early_stop=False):
    return lavan_style_attack_batch(model, image, y, y_targ, [region], steps, step_size, s, seed, w2, early_stop)[0]


# -- black-box ---------------------------------------------------------------------------


class QueryModel:
    """Probability-only view of a model that counts (and optionally caps) queries."""

    def __init__(self, model: VictimModel, budget: int | None = None):
        self._model = model
        self.budget = budget
        self.count = 0

    @property
    def class_count(self) -> int:
        return self._model.class_count

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=DTYPE)
        n = 1 if images.ndim == 3 else len(images)
        if self.budget is not None and self.count + n > self.budget:
            raise QueryBudgetExceeded(f"{self.count} + {n} queries exceeds budget {self.budget}")
        self.count += n
        # float64 so that confident outputs do not underflow to exactly 0
        return softmax(self._model.logits(images).astype(np.float64))


def nes_gradient(query, image, label: int, sigma: float = 0.01, n_samples: int = 200, seed: int = 0,
                 mask: np.ndarray | None = None, targeted: bool = True, noise: np.ndarray | None = None) -> np.ndarray:
    """Antithetic NES estimate of the gradient of the query loss.

    The loss is ``CE(p, label)`` when ``targeted`` (descending it moves toward
    ``label``). Untargeted, it is the log-probability margin
    ``log p_label - max_{j != label} log p_j``, which equals the logit margin
    and, unlike ``-CE``, does not flatten out when ``p_label`` is near 1.
    Perturbations are i.i.d.
    standard normal on the masked pixels (all channels); exactly
    ``2 * n_samples`` queries are spent.
    """
    if sigma <= 0:
        raise AttackError("sigma must be > 0")
    if n_samples < 1:
        raise AttackError("n_samples must be >= 1")
    x = np.asarray(image, dtype=np.float64)
    m = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if noise is None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((n_samples,) + x.shape)
    u = np.where(m[..., None], noise, 0.0)
    batch = np.concatenate([x + sigma * u, x - sigma * u]).astype(DTYPE)
    probs = np.asarray(query(batch), dtype=np.float64)
    logp = np.log(np.clip(probs, np.finfo(np.float64).tiny, 1.0))
    if targeted:
        loss = -logp[:, label]
    else:
        loss = logp[:, label] - np.delete(logp, label, axis=1).max(axis=1)
    diff = loss[:n_samples] - loss[n_samples:]
    return (np.tensordot(diff, u, axes=1) / (2 * sigma * n_samples)).astype(DTYPE)


@dataclass
class BlackBoxConfig:
    surrogate_steps: int = 400
    query_budget: int = 12000
    nes_samples: int = 20
    sigma: float = 0.01
    eta: float = 0.5
    seed: int = 0


def blackbox_iap_attack(query: QueryModel, surrogate: VictimModel, image, y: int, config: AttackConfig | None = None,
                        bb: BlackBoxConfig | None = None, y_targ: int | None = None) -> AttackOutcome:
    """Query-only IAP: surrogate Grad-CAM placement and warm start, then NES refinement.

    Untargeted when ``y_targ`` is None (success = the queried label leaves
    ``y``). The color-preserving update is reused with NES gradients; the
    perceptual-distance gradient is computed locally since it only needs the
    clean image. Queries are charged to ``query``.
    """
    config = (config or AttackConfig()).validate()
    bb = bb or BlackBoxConfig()
    x = np.asarray(image, dtype=DTYPE)
    targeted = y_targ is not None
    label = y_targ if targeted else y
    region, sens, _ = localize(surrogate, x, y, config)
    start = query.count

    # surrogate warm start
    delta = np.where(region.mask[..., None], lift_zeros(x), x).astype(DTYPE)
    w1, w2 = (config.w1, config.w2) if targeted else (0.0, 1.0)
    other = y_targ if targeted else (y + 1) % surrogate.class_count
    for _ in range(bb.surrogate_steps):
        xa = compose(x, delta, region.mask)
        _, grad, probs = _class_terms(surrogate, xa[None], np.array([y]), np.array([other]), w1, w2)
        if _gate(probs, np.array([label]), config.s, targeted)[0]:
            break
        g = grad[0] + config.w3 * perceptual_distance_gradient(x, xa, region, sens)
        delta = update_step(delta, np.where(region.mask[..., None], g, 0).astype(DTYPE), sens, config.eta)

    # query phase
    rng = np.random.default_rng(bb.seed)
    steps = 0
    success = False
    conf = 0.0
    while True:
        xa = compose(x, delta, region.mask)
        if query.budget is not None and query.count + 1 > query.budget:
            break
        probs = query(xa[None])
        conf = float(probs[0, label])
        if _gate(probs, np.array([label]), 0.5 if not targeted else config.s, targeted)[0]:
            success = True
            break
        if query.count - start + 2 * bb.nes_samples + 1 > bb.query_budget:
            break
        g = nes_gradient(query, xa, label, bb.sigma, bb.nes_samples, int(rng.integers(2**31)), region.mask, targeted)
        g = g + config.w3 * perceptual_distance_gradient(x, xa, region, sens)
        delta = update_step(delta, np.where(region.mask[..., None], g, 0).astype(DTYPE), sens, bb.eta)
        steps += 1
    adv = compose(x, delta, region.mask)
    pred = int(np.argmax(probs[0]))
    return AttackOutcome(adv, success, conf, steps, 0, region.anchor, region, -1 if not targeted else y_targ, pred,
                         queries=query.count - start)
