"""Parameterized image augmentation with exact replay.

A draw produces an integer crop rectangle, a flip bit and a brightness
scalar, all derived from a single 64-bit seed through counter-based streams.
Applying the same parameters to the same image is bit-deterministic, which is
what keeps stored teacher embeddings consistent with the views a student
trains on.

Resize is bilinear with half-pixel centers and edge clamping: the source
coordinate of output column j is (j + 0.5) * crop_w / out_side - 0.5 relative
to the crop origin (rows likewise), neighbors are clamped to the crop
rectangle.  A full-frame crop therefore reproduces the input exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import rng

AREA_RANGE = (0.08, 1.0)
RATIO_RANGE = (0.75, 1.33)
BRIGHTNESS_RANGE = (0.8, 1.2)
MAX_DRAW_TRIES = 10

# crop_x, crop_y, crop_w, crop_h as u16; flags u8 (bit0 = hflip);
# brightness f32; draw_seed u64.  Little-endian, packed.
_WIRE = struct.Struct("<HHHHBfQ")
PARAMS_WIRE_SIZE = _WIRE.size


@dataclass(frozen=True)
class AugmentationParams:
    crop_x: int
    crop_y: int
    crop_w: int
    crop_h: int
    hflip: bool
    brightness: float
    draw_seed: int

    def validate(self, image_side: int) -> None:
        if self.crop_w < 1 or self.crop_h < 1:
            raise ValueError(f"crop size must be >= 1, got {self.crop_w}x{self.crop_h}")
        if self.crop_x < 0 or self.crop_y < 0:
            raise ValueError(f"crop origin must be >= 0, got ({self.crop_x}, {self.crop_y})")
        if self.crop_x + self.crop_w > image_side or self.crop_y + self.crop_h > image_side:
            raise ValueError(
                f"crop ({self.crop_x},{self.crop_y},{self.crop_w},{self.crop_h}) "
                f"exceeds {image_side}x{image_side} image"
            )
        lo, hi = BRIGHTNESS_RANGE
        if not lo <= self.brightness <= hi:
            raise ValueError(f"brightness {self.brightness} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class AugmentedImage:
    pixels: np.ndarray  # (side**2,) float32 in [0, 1]
    params: AugmentationParams


def identity_params(image_side: int, draw_seed: int = 0) -> AugmentationParams:
    return AugmentationParams(0, 0, image_side, image_side, False, 1.0, draw_seed)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def draw_params(seed: int, image_side: int, max_tries: int = MAX_DRAW_TRIES) -> AugmentationParams:
    """Draw replayable crop/flip/brightness parameters from a seed.

    Crop area fraction is uniform in AREA_RANGE and aspect ratio log-uniform
    in RATIO_RANGE; candidates whose rounded integer dimensions fall outside
    either range (or the frame) are rejected, up to max_tries, after which a
    full-frame center crop is used.  Every accepted crop therefore satisfies
    the ranges exactly, integer rounding included.
    """
    if image_side < 8:
        raise ValueError(f"image_side must be >= 8, got {image_side}")
    side = int(image_side)
    area_lo, area_hi = AREA_RANGE
    ratio_lo, ratio_hi = RATIO_RANGE
    log_lo, log_hi = np.log(ratio_lo), np.log(ratio_hi)
    total = float(side * side)

    crop = None
    for t in range(max_tries):
        area_frac = area_lo + (area_hi - area_lo) * float(rng.uniform01(seed, rng.AUG_AREA, t))
        ratio = float(np.exp(log_lo + (log_hi - log_lo) * float(rng.uniform01(seed, rng.AUG_RATIO, t))))
        target = area_frac * total
        w = _round_half_up(np.sqrt(target * ratio))
        h = _round_half_up(np.sqrt(target / ratio))
        if w < 1 or h < 1 or w > side or h > side:
            continue
        got_area = (w * h) / total
        got_ratio = w / h
        if not (area_lo <= got_area <= area_hi and ratio_lo <= got_ratio <= ratio_hi):
            continue
        x = min(int(rng.uniform01(seed, rng.AUG_POS_X, t) * (side - w + 1)), side - w)
        y = min(int(rng.uniform01(seed, rng.AUG_POS_Y, t) * (side - h + 1)), side - h)
        crop = (x, y, w, h)
        break
    if crop is None:
        crop = (0, 0, side, side)

    hflip = bool(rng.uniform01(seed, rng.AUG_FLIP) < 0.5)
    b_lo, b_hi = BRIGHTNESS_RANGE
    # Stored as f32 on the wire; quantize now so pack/unpack is lossless.
    brightness = float(np.float32(b_lo + (b_hi - b_lo) * float(rng.uniform01(seed, rng.AUG_BRIGHT))))
    return AugmentationParams(crop[0], crop[1], crop[2], crop[3], hflip, brightness, int(seed))


def _bilinear_resize(region: np.ndarray, out_side: int) -> np.ndarray:
    h, w = region.shape
    if (h, w) == (out_side, out_side):
        return region
    out_idx = np.arange(out_side, dtype=np.float64)

    src_y = (out_idx + 0.5) * (h / out_side) - 0.5
    y0f = np.floor(src_y)
    wy = src_y - y0f
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)

    src_x = (out_idx + 0.5) * (w / out_side) - 0.5
    x0f = np.floor(src_x)
    wx = src_x - x0f
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)

    top = region[np.ix_(y0, x0)] * (1.0 - wx) + region[np.ix_(y0, x1)] * wx
    bot = region[np.ix_(y1, x0)] * (1.0 - wx) + region[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy)[:, None] + bot * wy[:, None]


def apply(image, params: AugmentationParams) -> AugmentedImage:
    """Crop, resize back to the input side, flip, scale brightness, clamp."""
    arr = np.asarray(image, dtype=np.float64).ravel()
    side = int(np.sqrt(arr.size))
    if side * side != arr.size:
        raise ValueError(f"image is not square: {arr.size} pixels")
    params.validate(side)
    img = arr.reshape(side, side)

    region = img[params.crop_y : params.crop_y + params.crop_h, params.crop_x : params.crop_x + params.crop_w]
    out = _bilinear_resize(region, side)
    if params.hflip:
        out = out[:, ::-1]
    out = out * params.brightness
    out = np.clip(out, 0.0, 1.0)
    return AugmentedImage(pixels=out.ravel().astype(np.float32), params=params)


def replay(image, params: AugmentationParams) -> AugmentedImage:
    """Regenerate the exact stored view; entry point for shard consumers."""
    return apply(image, params)


def pack_params(p: AugmentationParams) -> bytes:
    return _WIRE.pack(p.crop_x, p.crop_y, p.crop_w, p.crop_h, int(p.hflip), p.brightness, p.draw_seed)


def unpack_params(buf: bytes) -> AugmentationParams:
    if len(buf) != PARAMS_WIRE_SIZE:
        raise ValueError(f"augmentation params need {PARAMS_WIRE_SIZE} bytes, got {len(buf)}")
    x, y, w, h, flags, brightness, seed = _WIRE.unpack(buf)
    return AugmentationParams(x, y, w, h, bool(flags & 1), float(brightness), seed)
