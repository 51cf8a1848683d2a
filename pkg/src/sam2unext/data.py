"""Image/mask datasets, flip augmentation, model-input preparation and a
seeded synthetic-shape generator."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from .errors import DatasetError
from .model import ModelConfig, image_to_tensor, normalize_image
from .nn_core import resize_bilinear

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    id: str


def read_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: str | Path) -> tuple[np.ndarray, int]:
    """Binary mask thresholded at 128, plus the number of pixels that were not 0 or 255."""
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"), dtype=np.uint8)
    gray = int(np.count_nonzero((raw != 0) & (raw != 255)))
    return (raw >= 128).astype(np.uint8), gray


def write_png(path: str | Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def load_dataset(images_dir: str | Path, masks_dir: str | Path) -> list[Sample]:
    """Pair images and masks by file stem, in lexicographic order."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    images = {p.stem: p for p in sorted(images_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS}
    masks = {p.stem: p for p in sorted(masks_dir.iterdir()) if p.suffix.lower() == ".png"}
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        log.warning("%d unmatched files ignored: %s", len(unmatched), unmatched)
    samples = []
    for stem in sorted(set(images) & set(masks)):
        image = read_rgb(images[stem])
        mask, gray = read_mask(masks[stem])
        if image.shape[:2] != mask.shape:
            log.warning("rejected %s: image %s vs mask %s", stem, image.shape[:2], mask.shape)
            continue
        if gray:
            log.warning("%s: %d non-binary mask pixels binarized at 128", stem, gray)
        samples.append(Sample(image, mask, stem))
    if not samples:
        raise DatasetError(f"no usable image/mask pairs in {images_dir} and {masks_dir}")
    return samples


def load_dataset_root(root: str | Path) -> list[Sample]:
    root = Path(root)
    return load_dataset(root / "images", root / "masks")


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Independent 50% horizontal and 50% vertical flips, same for image and mask."""
    image, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id)


def to_model_inputs(sample: Sample, cfg: ModelConfig, dtype=torch.float32):
    """``(image_high, image_low, gt_full)``; gt is nearest-resized to the high resolution."""
    x = image_to_tensor(sample.image, dtype)
    high = normalize_image(resize_bilinear(x, *cfg.high_res))
    low = normalize_image(resize_bilinear(x, *cfg.low_res))
    gt = torch.from_numpy(sample.mask.astype(np.float32)).to(dtype)[None, None]
    if tuple(gt.shape[2:]) != tuple(cfg.high_res):
        gt = F.interpolate(gt, size=tuple(cfg.high_res), mode="nearest")
    return high, low, gt


# --------------------------------------------------------------------------
# synthetic shapes


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n: int = Field(8, ge=1)
    canvas: tuple[int, int] = (64, 64)
    shapes: tuple[str, ...] = ("ellipse", "rectangle", "annulus")
    min_shapes: int = Field(1, ge=1)
    max_shapes: int = Field(3, ge=1)
    fg_range: tuple[float, float] = (0.05, 0.6)
    seed: int = 0


def rasterize(shape: dict, canvas: tuple[int, int]) -> np.ndarray:
    """Boolean mask of one shape record (center cy, cx; radii ry, rx; angle in radians)."""
    h, w = canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy += 0.5
    xx += 0.5
    c, s = np.cos(shape["angle"]), np.sin(shape["angle"])
    dy, dx = yy - shape["cy"], xx - shape["cx"]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    ry, rx = shape["ry"], shape["rx"]
    kind = shape["kind"]
    if kind == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    if kind == "annulus":
        r = (u / rx) ** 2 + (v / ry) ** 2
        return (r <= 1.0) & (r >= shape["inner"] ** 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def rasterize_all(shapes: list[dict], canvas) -> np.ndarray:
    mask = np.zeros(canvas, dtype=bool)
    for sh in shapes:
        mask |= rasterize(sh, canvas)
    return mask


def _draw_shapes(rng: np.random.Generator, spec: SynthSpec, base: np.ndarray) -> list[dict]:
    h, w = spec.canvas
    m = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes: list[dict] = []
    scale = min(h, w)
    for _ in range(200):
        if len(shapes) == m:
            break
        kind = str(rng.choice(spec.shapes))
        ry = float(rng.uniform(0.08, 0.28) * scale)
        rx = float(rng.uniform(0.08, 0.28) * scale)
        ext = max(rx, ry)
        cand = {
            "kind": kind,
            "cy": float(rng.uniform(ext, h - ext)) if h > 2 * ext else h / 2,
            "cx": float(rng.uniform(ext, w - ext)) if w > 2 * ext else w / 2,
            "ry": ry,
            "rx": rx,
            "angle": float(rng.uniform(0, np.pi)),
            "inner": float(rng.uniform(0.35, 0.6)) if kind == "annulus" else 0.0,
            "color": [int(v) for v in rng.integers(0, 256, size=3)],
        }
        if np.abs(np.asarray(cand["color"]) - base).sum() < 120:
            continue
        # keep shapes apart so each one is its own connected component
        new = rasterize(cand, spec.canvas)
        if not new.any():
            continue
        grown = _dilate(new, 2)
        if any((grown & rasterize(o, spec.canvas)).any() for o in shapes):
            continue
        shapes.append(cand)
    return shapes


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    return ndimage.binary_dilation(mask, iterations=r)


def _render(rng: np.random.Generator, spec: SynthSpec, shapes: list[dict], base: np.ndarray) -> np.ndarray:
    h, w = spec.canvas
    noise = rng.normal(0.0, 18.0, size=(h, w, 3))
    image = np.clip(base[None, None, :] + noise, 0, 255)
    for sh in shapes:
        m = rasterize(sh, spec.canvas)
        tex = rng.normal(0.0, 8.0, size=(h, w, 3))
        fill = np.clip(np.asarray(sh["color"], dtype=np.float64)[None, None, :] + tex, 0, 255)
        image[m] = fill[m]
    return np.round(image).astype(np.uint8)


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``.

    Shapes are redrawn until the foreground fraction lands in
    ``spec.fg_range``; colors are kept away from the background tone.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lo, hi = spec.fg_range
    records = []
    for i in range(spec.n):
        rng = np.random.default_rng([spec.seed, i])
        base = rng.integers(60, 196, size=3)
        for _ in range(1000):
            shapes = _draw_shapes(rng, spec, base)
            mask = rasterize_all(shapes, spec.canvas)
            if shapes and lo <= mask.mean() <= hi:
                break
        else:
            raise RuntimeError(f"could not place shapes with foreground fraction in {spec.fg_range}")
        image = _render(rng, spec, shapes, base)
        name = f"synth_{i:04d}"
        write_png(out / "images" / f"{name}.png", image)
        write_png(out / "masks" / f"{name}.png", (mask * 255).astype(np.uint8))
        records.append({"id": name, "shapes": shapes, "fg_fraction": float(mask.mean())})
    manifest = {"spec": spec.model_dump(mode="json"), "seed": spec.seed, "samples": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
