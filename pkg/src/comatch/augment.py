"""Weak (crop-and-flip) and strong (crop-and-flip + RandAugment) views.

Images are float arrays [C, H, W] (or batches [B, C, H, W]) with values in
[0, 1]. Every transform keeps the shape and clamps to [0, 1].

Randomness comes from a counter-based stream: every random decision for a
sample reads a fixed slot of :class:`SampleStream`, a pure function of
(seed, epoch, view, sample index, slot). A sample's augmentation therefore
does not depend on which batch it lands in, and the batch path and the
single-image path agree exactly. Slot layout per sample::

    0, 1      crop offsets (y, x)
    2         flip coin
    3 + 4j    index of transform j in the transform set
    4 + 4j    magnitude of transform j
    5 + 4j    Cutout centre row
    6 + 4j    Cutout centre column
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .kernels import counter_uniforms, equalize_levels, warp_bilinear

# Luminance weights used by Color / Contrast (ITU-R 601-2, as in PIL's "L" mode).
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TransformSpec:
    name: str
    parameter_range: tuple = None  # sampling range; None for parameter-free transforms
    domain: tuple = None           # accepted by transform_apply
    integer: bool = False


TRANSFORMS = {
    "Autocontrast": TransformSpec("Autocontrast"),
    "Brightness": TransformSpec("Brightness", (0.05, 0.95), (0.0, 2.0)),
    "Color": TransformSpec("Color", (0.05, 0.95), (0.0, 2.0)),
    "Contrast": TransformSpec("Contrast", (0.05, 0.95), (0.0, 2.0)),
    "Sharpness": TransformSpec("Sharpness", (0.05, 0.95), (0.0, 2.0)),
    "GaussianBlur": TransformSpec("GaussianBlur", (0.1, 1.0), (0.0, 3.0)),
    "Solarize": TransformSpec("Solarize", (0.0, 1.0), (0.0, 1.0)),
    "Posterize": TransformSpec("Posterize", (4, 8), (1, 8), integer=True),
    "Equalize": TransformSpec("Equalize"),
    "Identity": TransformSpec("Identity"),
    "Invert": TransformSpec("Invert"),
    "Rotate": TransformSpec("Rotate", (-30.0, 30.0), (-180.0, 180.0)),
    "ShearX": TransformSpec("ShearX", (-0.3, 0.3), (-1.0, 1.0)),
    "ShearY": TransformSpec("ShearY", (-0.3, 0.3), (-1.0, 1.0)),
    "TranslateX": TransformSpec("TranslateX", (-0.3, 0.3), (-1.0, 1.0)),
    "TranslateY": TransformSpec("TranslateY", (-0.3, 0.3), (-1.0, 1.0)),
    "Cutout": TransformSpec("Cutout", (0.3, 0.3), (0.0, 1.0)),
}

# The transform set used in the strong view unless configured otherwise.
DEFAULT_TRANSFORM_SET = (
    "Contrast", "Equalize", "Invert", "Rotate", "Posterize", "Solarize", "Color", "Brightness",
    "Sharpness", "ShearX", "ShearY", "Cutout", "TranslateX", "TranslateY", "GaussianBlur",
)


MAX_SLOTS = 256


@dataclass
class AugmentationPolicy:
    kind: str = "none"  # none | weak | strong
    transform_set: tuple = DEFAULT_TRANSFORM_SET
    transforms_per_image: int = 2
    magnitude_ranges: dict = field(default_factory=dict)
    pad: int = 4

    def __post_init__(self):
        if self.kind not in ("none", "weak", "strong"):
            raise ValidationError(f"unknown augmentation kind {self.kind!r}")
        if self.pad < 0:
            raise ValidationError("pad must be non-negative")
        self.transform_set = tuple(self.transform_set)
        if self.kind == "strong":
            if self.transforms_per_image < 1:
                raise ValidationError("strong augmentation needs at least one transform per image")
            if not self.transform_set:
                raise ValidationError("strong augmentation needs a non-empty transform set")
        for name in self.transform_set:
            if name not in TRANSFORMS:
                raise ValidationError(f"unknown transform {name!r}")
        for name, (lo, hi) in self.magnitude_ranges.items():
            spec = TRANSFORMS.get(name)
            if spec is None or spec.parameter_range is None:
                raise ValidationError(f"transform {name!r} takes no magnitude")
            plo, phi = spec.parameter_range
            if not plo <= lo <= hi <= phi:
                raise ValidationError(f"magnitude range {name} [{lo}, {hi}] leaves [{plo}, {phi}]")

        if 3 + 4 * self.transforms_per_image > MAX_SLOTS:
            raise ValidationError(f"at most {(MAX_SLOTS - 3) // 4} transforms per image")

    def range_for(self, name):
        return self.magnitude_ranges.get(name, TRANSFORMS[name].parameter_range)


_MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed, epoch, view):
    """64-bit key of the (seed, epoch, view) stream family."""
    return _mix(_mix(_mix(int(seed) & _MASK64) ^ (int(epoch) & _MASK64)) ^ (int(view) & _MASK64))


class SampleStream:
    """Random slots of one sample of one view in one epoch."""

    def __init__(self, seed, epoch, view, index):
        self.key = stream_key(seed, epoch, view)
        self.index = int(index)
        self._u = None

    def uniforms(self, slots=MAX_SLOTS):
        if self._u is None or len(self._u) < slots:
            self._u = counter_uniforms(self.key, np.array([self.index]), slots)[0]
        return self._u[:slots]

    def uniform_at(self, slot):
        return float(self.uniforms(max(slot + 1, 16))[slot])

    def __repr__(self):
        return f"SampleStream(key={self.key:#x}, index={self.index})"


def sample_stream(seed, epoch, view, index):
    return SampleStream(seed, epoch, view, index)


def _pick(u, n):
    """Uniform integer in [0, n) from uniforms ``u``."""
    return np.minimum((np.asarray(u) * n).astype(np.int64), n - 1)


def _magnitude(u, spec, rng_range):
    lo, hi = rng_range
    if spec.integer:
        return lo + _pick(u, hi - lo + 1)
    return lo + np.asarray(u) * (hi - lo)


# ------------------------------------------------------------------ weak


def hflip(image):
    return image[..., ::-1].copy()


def crop(image, pad, oy, ox):
    """Zero-pad by ``pad`` on every side and cut the H x W window at (oy, ox)."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    return padded[:, oy:oy + h, ox:ox + w].copy()


def _crop_flip_batch(images, pad, oy, ox, flip):
    b, c, h, w = images.shape
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    rows = oy[:, None] + np.arange(h)
    cols = np.where(flip[:, None], w - 1 - np.arange(w), np.arange(w)) + ox[:, None]
    out = padded[np.arange(b)[:, None, None], :, rows[:, :, None], cols[:, None, :]]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _weak_batch(images, u, pad):
    n = 2 * pad + 1
    return _crop_flip_batch(images, pad, _pick(u[:, 0], n), _pick(u[:, 1], n), u[:, 2] < 0.5)


def weak_augment(image, stream, pad=4):
    """Random ``pad``-pixel crop, then a horizontal flip with probability 1/2."""
    u = stream.uniforms(3)[None]
    return _weak_batch(image[None], u, pad)[0]


# --------------------------------------------------------------- helpers


def _col(values):
    return np.asarray(values, dtype=np.float64)[:, None, None, None]


def _blend(images, degenerate, factor):
    # factor == 1 returns ``images`` exactly
    f = _col(factor)
    return images * f + degenerate * (1.0 - f)


def _grayscale(images):
    if images.shape[1] == 3:
        return np.tensordot(_LUMA, images, axes=([0], [1]))[:, None]
    return images.mean(axis=1, keepdims=True)


def _filter3x3(images, kernel):
    # border pixels keep their value, matching PIL's ImageFilter behaviour
    b, c, h, w = images.shape
    out = images.astype(np.float64)
    if h < 3 or w < 3:
        return out
    acc = np.zeros((b, c, h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            acc += kernel[i, j] * images[:, :, i:i + h - 2, j:j + w - 2]
    out[:, :, 1:-1, 1:-1] = acc
    return out


def _quantize(images):
    return np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.int64)


_SMOOTH = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0


# ------------------------------------------------------------ transforms
#
# Batched: ``x`` is [B, C, H, W], ``m`` holds one magnitude per image.


def _autocontrast(x, m, centres):
    q = _quantize(x)
    lo = q.min(axis=(2, 3), keepdims=True)
    hi = q.max(axis=(2, 3), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1)
    return np.where(hi > lo, (q - lo) * (255.0 / span) / 255.0, x)


def _equalize(x, m, centres):
    levels = equalize_levels(_quantize(x))
    return np.where(levels >= 0, levels / 255.0, x)


def _posterize(x, m, centres):
    bits = np.asarray(m).astype(np.int64)
    keep = (~((1 << (8 - np.minimum(bits, 8))) - 1) & 0xFF)[:, None, None, None]
    return np.where(bits[:, None, None, None] >= 8, x, (_quantize(x) & keep) / 255.0)


def _solarize(x, m, centres):
    # threshold 1 touches nothing, threshold 0 inverts everything
    return np.where(x * 255.0 >= _col(m) * 256.0, 1.0 - x, x)


def _gaussian_blur(x, m, centres):
    s = np.asarray(m, dtype=np.float64)
    g = np.where(s > 0, np.exp(-1.0 / (2.0 * np.maximum(s, 1e-12) ** 2)), 0.0)
    wts = np.stack([g, np.ones_like(g), g], axis=1) / (1.0 + 2.0 * g)[:, None]
    _, _, h, w = x.shape
    padded = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros(x.shape)
    for i in range(3):
        for j in range(3):
            acc += _col(wts[:, i] * wts[:, j]) * padded[:, :, i:i + h, j:j + w]
    return acc


def _warp(x, mats):
    return warp_bilinear(x, mats)


def _centre(x):
    _, _, h, w = x.shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def _affine_batch(a, b, c, d, e, f):
    return np.stack([np.stack([a, b, c], axis=-1), np.stack([d, e, f], axis=-1)], axis=1)


def _rotate(x, m, centres):
    t = np.radians(np.asarray(m, dtype=np.float64))
    cx, cy = _centre(x)
    cos, sin = np.cos(t), np.sin(t)
    # positive angles turn the content counter-clockwise on screen, as PIL does
    return _warp(x, _affine_batch(cos, -sin, cx - cos * cx + sin * cy, sin, cos, cy - sin * cx - cos * cy))


def _shear_x(x, m, centres):
    r = np.asarray(m, dtype=np.float64)
    _, cy = _centre(x)
    one, zero = np.ones_like(r), np.zeros_like(r)
    return _warp(x, _affine_batch(one, r, -r * cy, zero, one, zero))


def _shear_y(x, m, centres):
    r = np.asarray(m, dtype=np.float64)
    cx, _ = _centre(x)
    one, zero = np.ones_like(r), np.zeros_like(r)
    return _warp(x, _affine_batch(one, zero, zero, r, one, -r * cx))


def _translate_x(x, m, centres):
    r = np.asarray(m, dtype=np.float64)
    one, zero = np.ones_like(r), np.zeros_like(r)
    return _warp(x, _affine_batch(one, zero, -r * x.shape[3], zero, one, zero))


def _translate_y(x, m, centres):
    r = np.asarray(m, dtype=np.float64)
    one, zero = np.ones_like(r), np.zeros_like(r)
    return _warp(x, _affine_batch(one, zero, zero, zero, one, -r * x.shape[2]))


def _cutout(x, m, centres):
    _, _, h, w = x.shape
    side = np.rint(np.asarray(m, dtype=np.float64) * h).astype(np.int64)
    cy, cx = centres[:, 0], centres[:, 1]
    y0 = np.maximum(cy - side // 2, 0)
    x0 = np.maximum(cx - side // 2, 0)
    ys = np.arange(h)[None, :, None]
    xs = np.arange(w)[None, None, :]
    inside = ((ys >= y0[:, None, None]) & (ys < (y0 + side)[:, None, None])
              & (xs >= x0[:, None, None]) & (xs < (x0 + side)[:, None, None]) & (side > 0)[:, None, None])
    return np.where(inside[:, None], 0.5, x)


def _brightness(x, m, centres):
    return _blend(x, 0.0, m)


def _color(x, m, centres):
    return _blend(x, _grayscale(x), m)


def _contrast(x, m, centres):
    mean = _grayscale(x).mean(axis=(1, 2, 3), dtype=np.float64)
    return _blend(x, _col(mean), m)


def _sharpness(x, m, centres):
    return _blend(x, _filter3x3(x, _SMOOTH).astype(x.dtype), m)


_BATCH_OPS = {
    "Identity": lambda x, m, c: x.copy(),
    "Autocontrast": _autocontrast,
    "Equalize": _equalize,
    "Invert": lambda x, m, c: 1.0 - x,
    "Brightness": _brightness,
    "Color": _color,
    "Contrast": _contrast,
    "Sharpness": _sharpness,
    "GaussianBlur": _gaussian_blur,
    "Solarize": _solarize,
    "Posterize": _posterize,
    "Rotate": _rotate,
    "ShearX": _shear_x,
    "ShearY": _shear_y,
    "TranslateX": _translate_x,
    "TranslateY": _translate_y,
    "Cutout": _cutout,
}


def _apply_batch(name, x, m, centres):
    out = _BATCH_OPS[name](x, m, centres)
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def transform_apply(spec, magnitude, image, centre=None):
    """Apply one named transform at ``magnitude`` (ignored by parameter-free ones).

    ``centre`` is the (row, column) of the Cutout square; the image centre by default.
    """
    if isinstance(spec, str):
        if spec not in TRANSFORMS:
            raise ValidationError(f"unknown transform {spec!r}")
        spec = TRANSFORMS[spec]
    if spec.domain is not None:
        lo, hi = spec.domain
        if magnitude is None or not lo <= magnitude <= hi:
            raise ValidationError(f"{spec.name} magnitude {magnitude} outside [{lo}, {hi}]")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValidationError(f"expected a [C,H,W] image, got shape {image.shape}")
    _, h, w = image.shape
    if centre is None:
        centre = (h // 2, w // 2)
    m = np.array([0.0 if magnitude is None else magnitude])
    return _apply_batch(spec.name, image[None], m, np.array([centre], dtype=np.int64))[0]


def _strong_batch(images, u, policy, traces=None):
    out = _weak_batch(images, u, policy.pad)
    names = policy.transform_set
    _, _, h, w = images.shape
    for j in range(policy.transforms_per_image):
        base = 3 + 4 * j
        which = _pick(u[:, base], len(names))
        centres = np.stack([_pick(u[:, base + 2], h), _pick(u[:, base + 3], w)], axis=1)
        mags = [None] * len(out)
        for k in np.unique(which):
            name = names[k]
            spec = TRANSFORMS[name]
            sel = np.nonzero(which == k)[0]
            if spec.parameter_range is not None:
                m = _magnitude(u[sel, base + 1], spec, policy.range_for(name))
            else:
                m = np.zeros(len(sel))
            out[sel] = _apply_batch(name, out[sel], m, centres[sel])
            if traces is not None:
                for s, v in zip(sel, m):
                    mags[s] = (name, None if spec.parameter_range is None
                               else int(v) if spec.integer else float(v))
        if traces is not None:
            for t, entry in zip(traces, mags):
                t.append(entry)
    return out


def rand_augment(image, policy, stream, trace=None):
    """Weak crop-and-flip, then ``M`` transforms drawn uniformly with replacement.

    Every decision reads its own slot of ``stream`` (see the module docstring).
    ``(name, magnitude)`` pairs are appended to ``trace`` when given.
    """
    if policy.kind != "strong":
        raise ValidationError("rand_augment needs a strong policy")
    u = stream.uniforms(3 + 4 * policy.transforms_per_image)[None]
    traces = None if trace is None else [trace]
    return _strong_batch(image[None], u, policy, traces)[0]


def augment_view(image, policy, stream, trace=None):
    if policy.kind == "none":
        return image
    if policy.kind == "weak":
        return weak_augment(image, stream, policy.pad)
    return rand_augment(image, policy, stream, trace)


def augment_batch(images, indices, policy, seed, epoch, view):
    """Augment ``images[k]`` (global sample id ``indices[k]``) for one view."""
    if policy.kind == "none":
        return images
    slots = 3 if policy.kind == "weak" else 3 + 4 * policy.transforms_per_image
    u = counter_uniforms(stream_key(seed, epoch, view), np.asarray(indices, dtype=np.int64), slots)
    if policy.kind == "weak":
        return _weak_batch(images, u, policy.pad)
    return _strong_batch(images, u, policy)
