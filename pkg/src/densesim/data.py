"""Datasets and augmentation pipelines.

Two augmentation recipes share one machinery:
  * pretraining: RandomResizedCrop scale [0.2, 1.0], hflip 0.5, color
    jitter (0.4, 0.4, 0.4, 0.1) with p=0.8, grayscale p=0.2, Gaussian
    blur p=0.5 with sigma in [0.1, 2.0];
  * segmentation: scale [0.5, 1.0], jitter (0.3, 0.3, 0.3, 0.1), no blur.

Geometry is fully captured by a ViewSpec (crop + hflip); photometric ops
apply to the rendered raster afterwards and never touch the ViewSpec.  All
randomness comes from the generator handed in, so a pair is replayed by
re-deriving the same generator.

The synthetic dataset paints a textured stuff background (class 0) plus
1-4 non-overlapping circles/rectangles whose classes own distinct hues,
with exact pixel masks.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from densesim import container, kernels
from densesim.errors import ConfigError, ParseError
from densesim.geometry import ViewSpec, intersect, view_source_coords
from densesim.seeding import derive_rng

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugConfig:
    out_size: int = 32
    area_range: tuple = (0.2, 1.0)
    aspect_range: tuple = (3.0 / 4.0, 4.0 / 3.0)
    p_hflip: float = 0.5
    p_jitter: float = 0.8
    jitter: tuple = (0.4, 0.4, 0.4, 0.1)  # brightness, contrast, saturation, hue
    p_gray: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    max_overlap_tries: int = 50


def pretrain_aug_config(out_size):
    return AugConfig(out_size=out_size)


def seg_aug_config(out_size):
    return AugConfig(
        out_size=out_size,
        area_range=(0.5, 1.0),
        jitter=(0.3, 0.3, 0.3, 0.1),
        p_blur=0.0,
    )


@dataclass
class AugmentedPair:
    x1: np.ndarray  # [3,S,S] float32 in [0,1]
    x2: np.ndarray
    spec1: ViewSpec
    spec2: ViewSpec
    photometric_log: dict = field(default_factory=dict)


# -- geometric sampling ----------------------------------------------------------


def sample_crop(rng, img_h, img_w, cfg: AugConfig) -> ViewSpec:
    """RandomResizedCrop box: area fraction and log-uniform aspect ratio.

    Ten placement attempts, then a centered fallback clamped to the valid
    aspect range (full image for square sources).  Boxes stay in float
    pixels so the sampled area fraction is exact.
    """
    area = float(img_h) * float(img_w)
    lo, hi = np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1])
    for _ in range(10):
        target = area * rng.uniform(cfg.area_range[0], cfg.area_range[1])
        aspect = float(np.exp(rng.uniform(lo, hi)))
        w = float(np.sqrt(target * aspect))
        h = float(np.sqrt(target / aspect))
        if w <= img_w and h <= img_h and w >= 1 and h >= 1:
            x0 = float(rng.uniform(0.0, img_w - w))
            y0 = float(rng.uniform(0.0, img_h - h))
            return ViewSpec(x0, y0, w, h, False, cfg.out_size)
    # fallback: largest centered crop with a legal aspect ratio
    in_ratio = img_w / img_h
    if in_ratio < cfg.aspect_range[0]:
        w, h = float(img_w), img_w / cfg.aspect_range[0]
    elif in_ratio > cfg.aspect_range[1]:
        w, h = img_h * cfg.aspect_range[1], float(img_h)
    else:
        w, h = float(img_w), float(img_h)
    return ViewSpec((img_w - w) / 2.0, (img_h - h) / 2.0, w, h, False, cfg.out_size)


def _with_flip(spec: ViewSpec, rng, cfg) -> ViewSpec:
    if rng.random() < cfg.p_hflip:
        return ViewSpec(spec.x0, spec.y0, spec.w, spec.h, True, spec.out_size)
    return spec


# -- photometric ops -------------------------------------------------------------


def rgb_to_hsv(img):
    """[3,...] in [0,1] -> HSV with hue in [0,1)."""
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    h = np.where(
        maxc == r,
        (g - b) / safe,
        np.where(maxc == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(delta == 0, 0.0, h / 6.0) % 1.0
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    return np.stack([h, s, maxc]).astype(img.dtype)


def hsv_to_rgb(hsv):
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(hsv.dtype)


def _grayscale(img):
    return np.tensordot(_LUMA, img, axes=(0, 0))[None].repeat(3, axis=0)


def _adjust(img, op, factor):
    if op == "brightness":
        out = img * factor
    elif op == "contrast":
        mean = _grayscale(img).mean()
        out = factor * img + (1.0 - factor) * mean
    elif op == "saturation":
        out = factor * img + (1.0 - factor) * _grayscale(img)
    else:  # hue shift, factor is the offset
        hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[0] = (hsv[0] + factor) % 1.0
        out = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_photometric(img, rng, cfg: AugConfig):
    """Jitter/grayscale/blur one rendered view; returns (image, log)."""
    log = {}
    img = img.astype(np.float32, copy=True)
    if rng.random() < cfg.p_jitter:
        order = rng.permutation(4)
        names = ("brightness", "contrast", "saturation", "hue")
        b, c, s, hu = cfg.jitter
        strengths = {
            "brightness": rng.uniform(max(0.0, 1 - b), 1 + b),
            "contrast": rng.uniform(max(0.0, 1 - c), 1 + c),
            "saturation": rng.uniform(max(0.0, 1 - s), 1 + s),
            "hue": rng.uniform(-hu, hu),
        }
        for k in order:
            img = _adjust(img, names[k], strengths[names[k]])
        log["jitter"] = {names[k]: strengths[names[k]] for k in order}
    if rng.random() < cfg.p_gray:
        img = _grayscale(img).astype(np.float32)
        log["grayscale"] = True
    if cfg.p_blur > 0 and rng.random() < cfg.p_blur:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma=(0.0, sigma, sigma), mode="mirror")
        log["blur_sigma"] = sigma
    return np.clip(img, 0.0, 1.0).astype(np.float32), log


# -- view rendering and pair sampling --------------------------------------------


def render_view(image, spec: ViewSpec):
    """Resample a [3,H,W] image into the view's raster (bilinear)."""
    img = np.ascontiguousarray(image, dtype=np.float32)
    coords = view_source_coords(spec, img.shape[1], img.shape[2])[None].astype(np.float32)
    return kernels.bilinear_forward(img[None], coords)[0]


def sample_pair(image, rng, cfg: AugConfig) -> AugmentedPair:
    """Two overlapping augmented views of one image.

    Crop+flip pairs are resampled jointly (up to max_overlap_tries) until
    they intersect; the full-image fallback keeps the step well-defined
    either way.  Photometric parameters are drawn independently per view.
    """
    h, w = image.shape[1], image.shape[2]
    spec1 = spec2 = None
    for _ in range(cfg.max_overlap_tries):
        cand1 = _with_flip(sample_crop(rng, h, w, cfg), rng, cfg)
        cand2 = _with_flip(sample_crop(rng, h, w, cfg), rng, cfg)
        if intersect(cand1, cand2) is not None:
            spec1, spec2 = cand1, cand2
            break
    if spec1 is None:
        spec1 = ViewSpec(0.0, 0.0, float(w), float(h), False, cfg.out_size)
        spec2 = spec1
    x1, log1 = apply_photometric(render_view(image, spec1), rng, cfg)
    x2, log2 = apply_photometric(render_view(image, spec2), rng, cfg)
    return AugmentedPair(x1, x2, spec1, spec2, {"view1": log1, "view2": log2})


def sample_pretrain_pair(image, rng, config: AugConfig) -> AugmentedPair:
    return sample_pair(image, rng, config)


def sample_seg_pair(image, rng, config: AugConfig) -> AugmentedPair:
    return sample_pair(image, rng, config)


# -- synthetic shapes dataset -----------------------------------------------------

_HUE_SLOTS = 12


def _smooth_noise(rng, size, cells=8):
    """Low-frequency texture: coarse noise bilinearly upsampled to size."""
    coarse = rng.normal(0.0, 1.0, size=(1, 1, cells, cells)).astype(np.float32)
    from densesim.geometry import raster_centers

    coords = raster_centers(size)[None].astype(np.float32)
    return kernels.bilinear_forward(coarse, coords)[0, 0]


def _paint_shape(rng, size, occupied):
    """Random circle or rectangle mask avoiding occupied pixels, or None."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(20):
        if rng.random() < 0.5:
            r = rng.uniform(0.11, 0.18) * size
            cx = rng.uniform(r + 1, size - r - 1)
            cy = rng.uniform(r + 1, size - r - 1)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            hw = rng.uniform(0.09, 0.16) * size
            hh = rng.uniform(0.09, 0.16) * size
            cx = rng.uniform(hw + 1, size - hw - 1)
            cy = rng.uniform(hh + 1, size - hh - 1)
            mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        if not np.any(mask & occupied):
            return mask
    return None


def thing_hue(cls, num_things):
    """Base hue of thing class `cls` (1-based): evenly spread hue slots."""
    slot = (cls - 1) * _HUE_SLOTS // num_things
    return slot / _HUE_SLOTS


def gen_shapes_dataset(n, num_classes, size, seed):
    """Labeled synthetic images: (images [N,3,S,S] f32, masks [N,S,S] i64).

    Class 0 is textured stuff background; classes 1..num_classes-1 are
    things with distinct base hues, each instance brightness-jittered.
    """
    if num_classes < 2:
        raise ConfigError(f"need >= 2 classes (background + things), got {num_classes}")
    num_things = num_classes - 1
    if num_things > _HUE_SLOTS:
        raise ConfigError(f"at most {_HUE_SLOTS} thing classes supported, got {num_things}")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        rng = derive_rng(seed, "shapes", i)
        base_v = rng.uniform(0.35, 0.55)
        tex = _smooth_noise(rng, size) * rng.uniform(0.03, 0.08)
        bg_hsv = np.stack(
            [
                np.full((size, size), rng.uniform(0.0, 1.0), dtype=np.float32),
                np.full((size, size), rng.uniform(0.04, 0.12), dtype=np.float32),
                np.clip(base_v + tex, 0.0, 1.0).astype(np.float32),
            ]
        )
        img = hsv_to_rgb(bg_hsv)
        mask = np.zeros((size, size), dtype=np.int64)
        occupied = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            shape_mask = _paint_shape(rng, size, occupied)
            if shape_mask is None:
                continue
            cls = int(rng.integers(1, num_classes))
            hue = (thing_hue(cls, num_things) + rng.uniform(-0.01, 0.01)) % 1.0
            sat = rng.uniform(0.85, 1.0)
            val = np.clip(rng.uniform(0.55, 0.85) * rng.uniform(0.75, 1.05), 0.0, 1.0)
            color = hsv_to_rgb(np.array([[[hue]], [[sat]], [[val]]], dtype=np.float32))
            img = np.where(shape_mask[None], color, img)
            mask[shape_mask] = cls
            occupied |= shape_mask
        img = img + rng.normal(0.0, 0.02, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = mask
    return images, masks


def class_kinds(num_classes):
    """0 = stuff for the background class, 1 = thing for everything else."""
    kinds = np.ones(num_classes, dtype=np.int64)
    kinds[0] = 0
    return kinds


# -- dataset persistence -----------------------------------------------------------


def save_dataset(path, images, masks, kinds):
    container.save(path, {"images": images, "masks": masks, "class_kinds": kinds})


def load_dataset(path):
    """Load (images, masks, class_kinds) from a container file or directory.

    A directory may hold either a data.dst container or loose .ppm images
    (unlabeled: masks and kinds come back as None).
    """
    import os

    if os.path.isdir(path):
        inner = os.path.join(path, "data.dst")
        if os.path.exists(inner):
            return load_dataset(inner)
        ppms = sorted(f for f in os.listdir(path) if f.endswith(".ppm"))
        if not ppms:
            raise ParseError(f"{path}: no data.dst and no .ppm files")
        images = np.stack([load_ppm(os.path.join(path, f)) for f in ppms])
        return images, None, None
    entries = container.load(path)
    if "images" not in entries:
        raise ParseError(f"{path}: dataset container missing 'images' entry")
    return entries["images"], entries.get("masks"), entries.get("class_kinds")


# -- PPM (P6) ---------------------------------------------------------------------


def save_ppm(image, path):
    """[3,H,W] in [0,1] -> binary P6, one byte per sample."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ParseError(f"save_ppm expects [3,H,W], got {img.shape}")
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def _read_token(buf, pos):
    # skip whitespace and '#' comments between header tokens
    while pos < len(buf):
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("ppm: truncated header")
    return buf[start:pos], pos


def load_ppm(path):
    """Binary P6 file -> [3,H,W] float32 in [0,1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise ParseError(f"{path}: bad magic {magic!r}, expected b'P6'")
    wtok, pos = _read_token(buf, pos)
    htok, pos = _read_token(buf, pos)
    mtok, pos = _read_token(buf, pos)
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError:
        raise ParseError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise ParseError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    raw = buf[pos : pos + need]
    if len(raw) < need:
        raise ParseError(f"{path}: truncated pixel payload ({len(raw)} of {need} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
