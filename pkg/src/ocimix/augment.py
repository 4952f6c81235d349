"""Standard augmentation operators, Beta mixing ratios, EnMix and AdpMix.

Image ops accept ``(H, W)`` or ``(H, W, channels)`` arrays with values in
[0, 1].  Only ``identity`` and ``gaussian_noise`` accept flat vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .stream import Example

IMAGE_KINDS = {"horizontal_flip", "random_resized_crop", "color_jitter", "grayscale"}
KINDS = IMAGE_KINDS | {"identity", "gaussian_noise"}


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.2
    delta: float = 0.05
    kappa: float = 2.0
    tau: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


@dataclass(frozen=True)
class MixedExample:
    features: np.ndarray
    label: np.ndarray  # soft label over all classes
    sources: tuple[int, ...] = ()
    mus: tuple[float, ...] = ()


def lift(example: Example, class_count: int) -> MixedExample:
    y = np.zeros(class_count)
    y[example.label] = 1.0
    return MixedExample(example.features, y, (example.uid,), ())


# ------------------------------------------------------------------ ops

@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.kind == "random_resized_crop":
            a, b = self.params
            if not 0 < a <= b <= 1:
                raise ValueError(f"crop scale range must satisfy 0 < a <= b <= 1, got {a}, {b}")

    def __call__(self, x: np.ndarray, rng) -> np.ndarray:
        if self.kind in IMAGE_KINDS and x.ndim not in (2, 3):
            raise ValueError(f"{self.kind} needs image-shaped features, got shape {x.shape}")
        return _APPLY[self.kind](x, rng, *self.params)

    @property
    def strength(self) -> float:
        if self.kind == "random_resized_crop":
            return crop_strength(*self.params)
        if self.kind in ("color_jitter", "gaussian_noise"):
            return float(self.params[0])
        return 0.0

    def describe(self) -> str:
        name = _SHORT_NAMES[self.kind]
        return name + (":" + ",".join(repr(p) for p in self.params) if self.params else "")


def _identity(x, rng):
    return x


def _flip(x, rng, p=0.5):
    if rng.random() < p:
        return x[:, ::-1].copy()
    return x


def _resize_bilinear(img, top, left, h, w, out_h, out_w):
    # sample the crop on a pixel-centre grid; a full-size crop maps onto itself
    ys = np.clip(top + (np.arange(out_h) + 0.5) * h / out_h - 0.5, top, top + h - 1)
    xs = np.clip(left + (np.arange(out_w) + 0.5) * w / out_w - 0.5, left, left + w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, top + h - 1)
    x1 = np.minimum(x0 + 1, left + w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top_row = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom_row = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top_row * (1 - wy) + bottom_row * wy


def _crop(x, rng, a, b, ratio=(3 / 4, 4 / 3)):
    if a >= 1.0:
        return x
    height, width = x.shape[:2]
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(a, b)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return _resize_bilinear(x, top, left, h, w, height, width)
    return x


def _jitter(x, rng, strength):
    lo, hi = max(0.0, 1 - strength), 1 + strength
    out = x * rng.uniform(lo, hi)
    mean = out.mean()
    out = (out - mean) * rng.uniform(lo, hi) + mean
    if out.ndim == 3 and out.shape[2] == 3:
        gray = _luma(out)[..., None]
        out = (out - gray) * rng.uniform(lo, hi) + gray
    return np.clip(out, 0.0, 1.0)


def _luma(img):
    return img @ np.array([0.299, 0.587, 0.114])


def _grayscale(x, rng, p=0.2):
    if x.ndim == 3 and x.shape[2] == 3 and rng.random() < p:
        return np.repeat(_luma(x)[..., None], 3, axis=2)
    return x


def _noise(x, rng, sigma):
    return np.clip(x + sigma * rng.standard_normal(x.shape), 0.0, 1.0)


_APPLY = {
    "identity": _identity,
    "horizontal_flip": _flip,
    "random_resized_crop": _crop,
    "color_jitter": _jitter,
    "grayscale": _grayscale,
    "gaussian_noise": _noise,
}

_SHORT_NAMES = {
    "identity": "identity",
    "horizontal_flip": "flip",
    "random_resized_crop": "crop",
    "color_jitter": "jitter",
    "grayscale": "gray",
    "gaussian_noise": "noise",
}
_KIND_OF = {v: k for k, v in _SHORT_NAMES.items()}


def parse_pipeline(text: str) -> list[AugmentOp]:
    """Parse e.g. ``"crop:0.6,0.6|flip|jitter:0.4|gray"``.

    An empty string or ``"identity"`` yields the identity pipeline.
    """
    ops = []
    for token in filter(None, (t.strip() for t in text.split("|"))):
        name, _, args = token.partition(":")
        if name not in _KIND_OF:
            raise ValueError(f"unknown augmentation {name!r} in {text!r}")
        params = tuple(float(v) for v in args.split(",")) if args else ()
        ops.append(AugmentOp(_KIND_OF[name], params))
    return ops


def format_pipeline(ops) -> str:
    return "|".join(op.describe() for op in ops) or "identity"


def apply_pipeline(ops, example: Example, rng) -> Example:
    x = example.features
    for op in ops:
        x = op(x, rng)
    return replace(example, features=x)


def crop_strength(a: float, b: float) -> float:
    if a > b:
        raise ValueError(f"crop scale range needs a <= b, got {a}, {b}")
    return (1 - a) + (1 - b)


def sample_beta(alpha: float, rng) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return float(rng.beta(alpha, alpha))


# ---------------------------------------------------------------- mixing

def _mix(x_i, x_j, y_i, y_j, mu_x, mu_y):
    x_i = np.asarray(x_i)
    x_j = np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise ValueError(f"cannot mix shapes {x_i.shape} and {x_j.shape}")
    for mu in (mu_x, mu_y):
        if not 0.0 <= mu <= 1.0:
            raise ValueError(f"mixing ratio {mu} outside [0, 1]")
    return mu_x * x_i + (1 - mu_x) * x_j, mu_y * y_i + (1 - mu_y) * y_j


def _label_vector(example, class_count):
    y = np.zeros(class_count)
    y[example.label] = 1.0
    return y


def enmix(view_i: Example, view_j: Example, mu: float, class_count: int) -> MixedExample:
    """Mix two augmented memory views and their labels with one ratio."""
    x, y = _mix(view_i.features, view_j.features,
                _label_vector(view_i, class_count), _label_vector(view_j, class_count), mu, mu)
    return MixedExample(x, y, (view_i.uid, view_j.uid), (mu, mu))


def adaptive_mu_y(mu_x: float, norm_new: float, norm_old: float, cfg: MixConfig) -> float:
    """Label ratio for AdpMix, inflated toward the old class under weight imbalance."""
    if norm_old > 0:
        ratio = norm_new / norm_old
    else:
        ratio = math.inf if norm_new > 0 else 0.0
    if ratio > cfg.kappa and mu_x > cfg.tau:
        return min(mu_x + cfg.delta * ratio, 1.0)
    return mu_x


def adpmix(old_sample: Example, new_sample: Example, mu_x: float, mu_y: float,
           class_count: int) -> MixedExample:
    x, y = _mix(old_sample.features, new_sample.features,
                _label_vector(old_sample, class_count), _label_vector(new_sample, class_count),
                mu_x, mu_y)
    return MixedExample(x, y, (old_sample.uid, new_sample.uid), (mu_x, mu_y))


def enmix_batch(views, class_count: int, cfg: MixConfig, rng) -> list[MixedExample]:
    """EnMix every view with a partner; output i starts from view i.

    Partners follow a random cyclic order, so no view is paired with itself
    and each is used once as a partner.  One Beta ratio per pair; a single
    view is returned unmixed.
    """
    views = list(views)
    if len(views) < 2:
        return [lift(v, class_count) for v in views]
    order = rng.permutation(len(views))
    partner = np.empty(len(views), dtype=int)
    partner[order] = np.roll(order, -1)
    return [enmix(v, views[partner[i]], sample_beta(cfg.alpha, rng), class_count)
            for i, v in enumerate(views)]


def adpmix_batch(memory, current, current_classes, norm_new, norm_old, class_count,
                 cfg: MixConfig, rng) -> list[MixedExample]:
    """Cross-mix each old-class memory sample with a random current sample."""
    current = list(current)
    if not current:
        return []
    current_classes = set(current_classes)
    out = []
    for old in memory:
        if old.label in current_classes:
            continue
        new = current[int(rng.integers(0, len(current)))]
        mu_x = sample_beta(cfg.alpha, rng)
        mu_y = adaptive_mu_y(mu_x, norm_new, norm_old, cfg)
        out.append(adpmix(old, new, mu_x, mu_y, class_count))
    return out
