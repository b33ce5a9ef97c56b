"""Seeded augmentation: decode a 4-byte seed into a parameter bundle and
apply it to an image with bit-exact float32 arithmetic.

The draw order of :func:`decode` is a wire contract.  Version 1, stamped as
``pipeline_version`` in every cache header, fixes:

  PCG-XSH-RR 64/32 seeded as ``pcg_seed(d0, stream=d0)``, then draws in the
  order: crop scale, crop aspect ratio (linear, not log), crop x, crop y,
  hflip coin, jitter brightness/contrast/saturation factors, erase coin,
  erase area, erase aspect, erase x, erase y, erase fill triple (noise fill
  only), one (op, magnitude) pair per configured RandAugment slot, then the
  mix lambda (Johnk rejection for Beta(a, a)) and, for cutmix, the box
  center.  A stage whose spec leaves it disabled consumes no draws.

Integer rounding inside the decoder is ``floor(x + 0.5)`` so that any
reimplementation (including ones without round-half-to-even primitives)
reproduces the same boxes.

:func:`apply` evaluates in float32 with a fixed operation order:
crop -> bilinear resize (half-pixel centers) -> hflip -> color jitter ->
RandAugment ops -> normalize -> erase -> mix.  Identical inputs give
identical bytes regardless of process or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import PcgState, choice, pcg_seed, uniform

# Identifies (generator variant, draw order, op table) for cache headers.
PIPELINE_VERSION = 1

RANDAUG_OPS = (
    "identity", "brightness", "contrast", "saturation", "invert",
    "solarize", "posterize", "auto_contrast", "sharpness",
    "rotate", "shear_x", "shear_y", "translate_x", "translate_y",
)
RANDAUG_MAX_MAGNITUDE = 30

_SMOOTH_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]],
                          dtype=np.float32) / np.float32(13.0)


@dataclass(frozen=True)
class PipelineSpec:
    """Augmentation hyper-ranges; the decoder consults nothing else.

    A stage is disabled by its natural zero (probability 0, op count 0,
    strength 0, ``mix_mode`` None) and then consumes no PCG draws.
    """

    image_size: int = 32
    crop_scale: tuple[float, float] = (0.3, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    hflip_prob: float = 0.5
    jitter: tuple[float, float, float] = (0.4, 0.4, 0.4)
    erase_prob: float = 0.25
    erase_scale: tuple[float, float] = (0.02, 0.33)
    erase_ratio: tuple[float, float] = (0.3, 10.0 / 3.0)
    erase_fill: str = "zero"  # "zero" | "noise"
    randaug_count: int = 2
    randaug_magnitude: int = 9
    mix_mode: str | None = None  # None | "mixup" | "cutmix"
    mix_alpha: float = 1.0
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self) -> None:
        if self.image_size < 1:
            raise ValueError("image_size must be positive")
        for lo, hi in (self.crop_scale, self.crop_ratio,
                       self.erase_scale, self.erase_ratio):
            if not lo < hi:
                raise ValueError("range bounds must satisfy lo < hi")
        for p in (self.hflip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.erase_fill not in ("zero", "noise"):
            raise ValueError("erase_fill must be 'zero' or 'noise'")
        if self.mix_mode not in (None, "mixup", "cutmix"):
            raise ValueError("mix_mode must be None, 'mixup' or 'cutmix'")
        if self.randaug_count < 0 or self.randaug_magnitude < 0 \
                or self.randaug_magnitude > RANDAUG_MAX_MAGNITUDE:
            raise ValueError("bad RandAugment configuration")

    @property
    def mix_enabled(self) -> bool:
        return self.mix_mode is not None


@dataclass(frozen=True)
class EraseBox:
    x: int
    y: int
    w: int
    h: int
    fill: tuple[float, float, float] | None  # None -> zero fill


@dataclass(frozen=True)
class MixParams:
    mode: str                 # "mixup" | "cutmix"
    lam: float                # convex weight of the primary image
    partner: int | None       # sample_id, assigned from the epoch plan
    cut_box: tuple[int, int, int, int] | None  # (x, y, w, h), cutmix only


@dataclass(frozen=True)
class AugParams:
    """Fully decoded augmentation realization for one record."""

    crop: tuple[int, int, int, int]           # (x, y, w, h) in source pixels
    hflip: bool
    color_jitter: tuple[float, float, float]  # brightness, contrast, saturation
    erase: EraseBox | None
    randaug_ops: tuple[tuple[int, int], ...]  # (op_id, magnitude)
    mix: MixParams | None

    def with_partner(self, partner: int) -> "AugParams":
        if self.mix is None:
            raise ValueError("no mix stage to attach a partner to")
        return replace(self, mix=replace(self.mix, partner=partner))


def _iround(x: float) -> int:
    return int(math.floor(x + 0.5))


def decode(d0: int, spec: PipelineSpec,
           source_hw: tuple[int, int]) -> AugParams:
    """Expand a 4-byte seed into the full parameter bundle.

    ``source_hw`` is the (height, width) of the source image the crop box
    must fit inside.  See the module docstring for the frozen draw order.
    """
    src_h, src_w = source_hw
    s: PcgState = pcg_seed(d0, d0)

    # Crop: scale and aspect drawn once, box clamped inside the source.
    s, sc = uniform(s, spec.crop_scale[0], spec.crop_scale[1])
    s, ratio = uniform(s, spec.crop_ratio[0], spec.crop_ratio[1])
    area = sc * src_h * src_w
    cw = min(max(_iround(math.sqrt(area * ratio)), 1), src_w)
    ch = min(max(_iround(math.sqrt(area / ratio)), 1), src_h)
    s, cx = choice(s, src_w - cw + 1)
    s, cy = choice(s, src_h - ch + 1)

    flip = False
    if spec.hflip_prob > 0.0:
        s, u = uniform(s, 0.0, 1.0)
        flip = u < spec.hflip_prob

    fb = fc = fs = 1.0
    if spec.jitter[0] > 0.0:
        s, fb = uniform(s, max(0.0, 1.0 - spec.jitter[0]), 1.0 + spec.jitter[0])
    if spec.jitter[1] > 0.0:
        s, fc = uniform(s, max(0.0, 1.0 - spec.jitter[1]), 1.0 + spec.jitter[1])
    if spec.jitter[2] > 0.0:
        s, fs = uniform(s, max(0.0, 1.0 - spec.jitter[2]), 1.0 + spec.jitter[2])

    erase = None
    if spec.erase_prob > 0.0:
        s, u = uniform(s, 0.0, 1.0)
        if u < spec.erase_prob:
            r = spec.image_size
            s, frac = uniform(s, spec.erase_scale[0], spec.erase_scale[1])
            s, er = uniform(s, spec.erase_ratio[0], spec.erase_ratio[1])
            earea = frac * r * r
            ew = min(max(_iround(math.sqrt(earea * er)), 1), r)
            eh = min(max(_iround(math.sqrt(earea / er)), 1), r)
            s, ex = choice(s, r - ew + 1)
            s, ey = choice(s, r - eh + 1)
            fill = None
            if spec.erase_fill == "noise":
                s, f0 = uniform(s, 0.0, 1.0)
                s, f1 = uniform(s, 0.0, 1.0)
                s, f2 = uniform(s, 0.0, 1.0)
                fill = (f0, f1, f2)
            erase = EraseBox(ex, ey, ew, eh, fill)

    ops = []
    for _ in range(spec.randaug_count):
        s, op = choice(s, len(RANDAUG_OPS))
        s, mag = choice(s, spec.randaug_magnitude + 1)
        ops.append((op, mag))

    mix = None
    if spec.mix_mode is not None:
        s, lam = _beta(s, spec.mix_alpha)
        if spec.mix_mode == "mixup":
            mix = MixParams("mixup", lam, None, None)
        else:
            r = spec.image_size
            cut = math.sqrt(1.0 - lam)
            bw = min(_iround(r * cut), r)
            bh = min(_iround(r * cut), r)
            s, bx = choice(s, r - bw + 1)
            s, by = choice(s, r - bh + 1)
            # Integer boxes quantize the area, so the effective lambda is
            # recomputed from the box; 1 - area/total then matches exactly.
            lam_adj = 1.0 - (bw * bh) / (r * r)
            mix = MixParams("cutmix", lam_adj, None, (bx, by, bw, bh))

    return AugParams(crop=(cx, cy, cw, ch), hflip=flip,
                     color_jitter=(fb, fc, fs), erase=erase,
                     randaug_ops=tuple(ops), mix=mix)


def _beta(s: PcgState, alpha: float) -> tuple[PcgState, float]:
    """Beta(alpha, alpha) via Johnk's rejection; draw count is stream-determined."""
    if alpha <= 0:
        raise ValueError("mix alpha must be positive")
    inv = 1.0 / alpha
    while True:
        s, u = uniform(s, 0.0, 1.0)
        s, v = uniform(s, 0.0, 1.0)
        x = u ** inv
        y = v ** inv
        if x + y <= 1.0:
            if x + y == 0.0:
                return s, 0.5
            return s, x / (x + y)


# ---------------------------------------------------------------------------
# Image pipeline


def apply(image: np.ndarray, params: AugParams, spec: PipelineSpec,
          partner: np.ndarray | None = None) -> np.ndarray:
    """Run the full pipeline on one uint8 HxWx3 image.

    ``partner`` is the partner sample's own fully augmented pre-mix tensor
    (float32, image_size x image_size x 3) and must be supplied exactly when
    ``params.mix`` is present.
    """
    if params.mix is not None and partner is None:
        raise ValueError("mix partner required")
    out = apply_premix(image, params, spec)
    if params.mix is None:
        return out
    m = params.mix
    if m.mode == "mixup":
        lam = np.float32(m.lam)
        return out * lam + partner * (np.float32(1.0) - lam)
    bx, by, bw, bh = m.cut_box
    out[by:by + bh, bx:bx + bw, :] = partner[by:by + bh, bx:bx + bw, :]
    return out


def apply_premix(image: np.ndarray, params: AugParams,
                 spec: PipelineSpec) -> np.ndarray:
    """Everything up to (and excluding) the mix stage."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("image must be HxWx3 uint8")
    cx, cy, cw, ch = params.crop
    if cx < 0 or cy < 0 or cx + cw > image.shape[1] or cy + ch > image.shape[0]:
        raise ValueError("crop box exceeds image bounds")
    x = image[cy:cy + ch, cx:cx + cw, :].astype(np.float32) / np.float32(255.0)
    x = resize_bilinear(x, spec.image_size, spec.image_size)
    if params.hflip:
        x = x[:, ::-1, :].copy()
    x = _color_jitter(x, params.color_jitter)
    for op_id, mag in params.randaug_ops:
        x = _apply_randaug_op(x, op_id, mag)
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    x = (x - mean) / std
    if params.erase is not None:
        e = params.erase
        if e.fill is None:
            x[e.y:e.y + e.h, e.x:e.x + e.w, :] = np.float32(0.0)
        else:
            fill = (np.asarray(e.fill, dtype=np.float32) - mean) / std
            x[e.y:e.y + e.h, e.x:e.x + e.w, :] = fill
    return x


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping.

    Source coordinates are computed in float64, interpolation weights and
    accumulation in float32, term order as written; an identity resize
    reproduces the input exactly.
    """
    in_h, in_w = x.shape[0], x.shape[1]
    sy = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5,
                 0.0, in_h - 1)
    sx = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5,
                 0.0, in_w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (sy - y0).astype(np.float32)[:, None, None]
    fx = (sx - x0).astype(np.float32)[None, :, None]
    one = np.float32(1.0)
    v00 = x[y0[:, None], x0[None, :], :]
    v01 = x[y0[:, None], x1[None, :], :]
    v10 = x[y1[:, None], x0[None, :], :]
    v11 = x[y1[:, None], x1[None, :], :]
    top = v00 * (one - fx) + v01 * fx
    bot = v10 * (one - fx) + v11 * fx
    return top * (one - fy) + bot * fy


def _gray(x: np.ndarray) -> np.ndarray:
    w = np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return x[:, :, 0] * w[0] + x[:, :, 1] * w[1] + x[:, :, 2] * w[2]


def _color_jitter(x: np.ndarray, factors: tuple[float, float, float]) -> np.ndarray:
    fb, fc, fs = factors
    if fb != 1.0:
        x = x * np.float32(fb)
    if fc != 1.0:
        m = _gray(x).mean(dtype=np.float32)
        x = (x - m) * np.float32(fc) + m
    if fs != 1.0:
        g = _gray(x)[:, :, None]
        x = (x - g) * np.float32(fs) + g
    if factors != (1.0, 1.0, 1.0):
        x = np.clip(x, np.float32(0.0), np.float32(1.0))
    return x


def _magnitude_level(mag: int) -> np.float32:
    return np.float32(mag / RANDAUG_MAX_MAGNITUDE)


def _enhance_factor(mag: int) -> np.float32:
    # [0.1, 1.9]: low magnitudes weaken the attribute, high ones amplify it.
    return np.float32(0.1) + np.float32(1.8) * _magnitude_level(mag)


def _apply_randaug_op(x: np.ndarray, op_id: int, mag: int) -> np.ndarray:
    name = RANDAUG_OPS[op_id]
    t = _magnitude_level(mag)
    if name == "identity":
        return x
    if name == "brightness":
        return np.clip(x * _enhance_factor(mag), 0.0, 1.0).astype(np.float32)
    if name == "contrast":
        m = _gray(x).mean(dtype=np.float32)
        return np.clip((x - m) * _enhance_factor(mag) + m, 0.0, 1.0).astype(np.float32)
    if name == "saturation":
        g = _gray(x)[:, :, None]
        return np.clip((x - g) * _enhance_factor(mag) + g, 0.0, 1.0).astype(np.float32)
    if name == "invert":
        return (np.float32(1.0) - x).astype(np.float32)
    if name == "solarize":
        thr = np.float32(1.0) - t
        return np.where(x > thr, np.float32(1.0) - x, x).astype(np.float32)
    if name == "posterize":
        bits = 8 - int(math.floor(float(t) * 4.0 + 0.5))
        levels = np.float32(2**bits - 1)
        return (np.floor(x * levels + np.float32(0.5)) / levels).astype(np.float32)
    if name == "auto_contrast":
        lo = x.min(axis=(0, 1))
        hi = x.max(axis=(0, 1))
        span = hi - lo
        safe = span > np.float32(0.0)
        scale = np.where(safe, np.float32(1.0) / np.where(safe, span, 1.0),
                         np.float32(1.0))
        shift = np.where(safe, lo, np.float32(0.0))
        return np.clip((x - shift) * scale, 0.0, 1.0).astype(np.float32)
    if name == "sharpness":
        blur = _smooth(x)
        f = _enhance_factor(mag)
        return np.clip(blur + (x - blur) * f, 0.0, 1.0).astype(np.float32)
    if name == "rotate":
        deg = 60.0 * float(t) - 30.0
        rad = math.radians(deg)
        return _warp_affine(x, math.cos(rad), -math.sin(rad), math.sin(rad),
                            math.cos(rad))
    if name == "shear_x":
        sh = 0.6 * float(t) - 0.3
        return _warp_affine(x, 1.0, sh, 0.0, 1.0)
    if name == "shear_y":
        sh = 0.6 * float(t) - 0.3
        return _warp_affine(x, 1.0, 0.0, sh, 1.0)
    if name == "translate_x":
        d = _iround((0.6 * float(t) - 0.3) * x.shape[1])
        return _translate(x, dx=d, dy=0)
    if name == "translate_y":
        d = _iround((0.6 * float(t) - 0.3) * x.shape[0])
        return _translate(x, dx=0, dy=d)
    raise ValueError(f"unknown RandAugment op id {op_id}")


_GRAY_FILL = np.float32(0.5)


def _smooth(x: np.ndarray) -> np.ndarray:
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += pad[i:i + x.shape[0], j:j + x.shape[1], :] * _SMOOTH_KERNEL[i, j]
    return out


def _translate(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.full_like(x, _GRAY_FILL)
    h, w = x.shape[0], x.shape[1]
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs, :] = x[ys_src, xs_src, :]
    return out


def _warp_affine(x: np.ndarray, a: float, b: float, c: float, d: float) -> np.ndarray:
    """Inverse-map the affine [[a, b], [c, d]] about the image center and
    sample bilinearly; out-of-bounds pixels take the gray fill."""
    h, w = x.shape[0], x.shape[1]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy_, dx_ = yy - cy, xx - cx
    sx = a * dx_ + b * dy_ + cx
    sy = c * dx_ + d * dy_ + cy
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.floor(sxc).astype(np.int64)
    y0 = np.floor(syc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sxc - x0).astype(np.float32)[:, :, None]
    fy = (syc - y0).astype(np.float32)[:, :, None]
    one = np.float32(1.0)
    v00 = x[y0, x0, :]
    v01 = x[y0, x1, :]
    v10 = x[y1, x0, :]
    v11 = x[y1, x1, :]
    top = v00 * (one - fx) + v01 * fx
    bot = v10 * (one - fx) + v11 * fx
    out = top * (one - fy) + bot * fy
    return np.where(inside[:, :, None], out, _GRAY_FILL).astype(np.float32)
