"""Dataset ingestion, the deterministic synthetic-lesion generator, and
batch iteration.

On-disk layout (shared by real corpora and the synthetic writer):
    root/images/<id>.jpg|png         8-bit RGB
    root/masks/<id>_segmentation.png 8-bit grayscale, binarized at 128
    root/manifest.tsv                lines "id<TAB>split", split in
                                     {train, val, test}
Flat roots (images and masks side by side) are accepted too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter


class DataError(Exception):
    pass


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray  # float32 [3, S, S] in [0, 1]
    mask: np.ndarray   # uint8 [1, S, S] in {0, 1}


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    seed: int = 0


IMAGE_EXTS = (".jpg", ".jpeg", ".png")
MASK_SUFFIX = "_segmentation.png"
VAL_FRACTION = 0.2


# -- ingestion ----------------------------------------------------------

def load_image(path: Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_mask(path: Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    arr = np.asarray(img, dtype=np.uint8)
    return (arr >= 128).astype(np.uint8)[None]


def _scan_pairs(root: Path) -> tuple[dict[str, Path], dict[str, Path]]:
    images, masks = {}, {}
    dirs = [root, root / "images", root / "masks"]
    for d in dirs:
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            if p.name.endswith(MASK_SUFFIX):
                masks[p.name[: -len(MASK_SUFFIX)]] = p
            elif p.suffix.lower() in IMAGE_EXTS:
                images[p.stem] = p
    return images, masks


def carve_validation(train_ids: Sequence[str], seed: int) -> tuple[list[str], list[str]]:
    """Deterministically split off 20% of training ids for validation
    (floor rule, remainder stays in train)."""
    ids = sorted(train_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_val = math.floor(VAL_FRACTION * len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(ids[i] for i in perm[n_val:])
    return train, val


def load_dataset(root, size: int = 256, seed: int = 0, allow_missing: bool = False,
                 manifest=None) -> tuple[DatasetSplit, Callable[[str], SegmentationSample]]:
    """Index a dataset tree; returns the split and a lazy per-id loader."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    images, masks = _scan_pairs(root)
    if not images:
        raise DataError(f"no samples found under {root}")

    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        report = ", ".join(unpaired[:10]) + ("..." if len(unpaired) > 10 else "")
        if not allow_missing:
            raise DataError(
                f"{len(unpaired)} unpaired image/mask ids under {root}: {report}")
    ids = sorted(set(images) & set(masks))
    if not ids:
        raise DataError(f"no paired samples under {root}")

    manifest = Path(manifest) if manifest else root / "manifest.tsv"
    split = DatasetSplit(seed=seed)
    if manifest.is_file():
        for ln, line in enumerate(manifest.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                sid, part = line.split("\t")
            except ValueError:
                raise DataError(f"{manifest}:{ln}: expected 'id<TAB>split'")
            if part not in ("train", "val", "test"):
                raise DataError(f"{manifest}:{ln}: unknown split {part!r}")
            getattr(split, part).append(sid)
        known = set(split.train) | set(split.val) | set(split.test)
        missing = sorted(known - set(ids))
        if missing and not allow_missing:
            raise DataError(f"manifest ids without files: {', '.join(missing[:10])}")
    else:
        split.train = list(ids)
    if not split.val and split.train:
        split.train, split.val = carve_validation(split.train, seed)

    def loader(sid: str) -> SegmentationSample:
        return SegmentationSample(sid, load_image(images[sid], size),
                                  load_mask(masks[sid], size))

    return split, loader


# -- synthetic corpus ---------------------------------------------------

MIN_LESION_AREA = 0.05
MAX_LESION_AREA = 0.60


def _blob_mask(size: int, blobs: list[dict]) -> np.ndarray:
    """Rasterize the union of star-shaped blobs: pixel inside iff its radius
    from the blob center is <= the blob's angular radius function."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for b in blobs:
        dy, dx = yy - b["cy"], xx - b["cx"]
        r = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        rb = b["r0"] * (1.0 + sum(a * np.cos(k * theta + ph)
                                  for k, a, ph in b["fourier"]))
        mask |= r <= rb
    return mask


def _sample_params(rng: np.random.Generator, size: int) -> dict:
    """Draw scene parameters; blob geometry is resampled until the lesion
    area lands in [5%, 60%] of the image."""
    params = {
        "base": np.array([0.72, 0.55, 0.48]) + rng.uniform(-0.06, 0.06, 3),
        "lesion_color": np.array([0.38, 0.24, 0.18]) + rng.uniform(-0.08, 0.08, 3),
        "noise_seed": int(rng.integers(2**31)),
        "hair": bool(rng.random() < 0.5),
        "ruler": bool(rng.random() < 0.3),
    }
    for _ in range(64):
        n_blobs = int(rng.integers(1, 3))
        blobs = []
        for _ in range(n_blobs):
            blobs.append({
                "cy": float(rng.uniform(0.3, 0.7) * size),
                "cx": float(rng.uniform(0.3, 0.7) * size),
                "r0": float(rng.uniform(0.14, 0.32) * size),
                "fourier": [(k, float(rng.uniform(0.0, 0.12)),
                             float(rng.uniform(0, 2 * np.pi)))
                            for k in range(2, 6)],
            })
        area = _blob_mask(size, blobs).mean()
        if MIN_LESION_AREA <= area <= MAX_LESION_AREA:
            params["blobs"] = blobs
            break
    else:
        raise RuntimeError("could not sample a lesion within area bounds")
    if params["hair"]:
        params["hairs"] = [
            {
                "p0": rng.uniform(0, size, 2),
                "p1": rng.uniform(0, size, 2),
                "ctrl": rng.uniform(0, size, 2),
            }
            for _ in range(int(rng.integers(3, 8)))
        ]
    if params["ruler"]:
        params["ruler_row"] = int(rng.integers(size // 8, size - size // 8))
    return params


def _render(params: dict, size: int) -> tuple[np.ndarray, np.ndarray]:
    mask = _blob_mask(size, params["blobs"])
    noise_rng = np.random.default_rng(params["noise_seed"])
    texture = gaussian_filter(noise_rng.standard_normal((size, size)), sigma=size / 16)
    texture = texture / (np.abs(texture).max() + 1e-9)

    img = np.empty((3, size, size), dtype=np.float64)
    for ch in range(3):
        img[ch] = params["base"][ch] + 0.05 * texture
    lesion_tex = gaussian_filter(noise_rng.standard_normal((size, size)), sigma=size / 32)
    lesion_tex = lesion_tex / (np.abs(lesion_tex).max() + 1e-9)
    for ch in range(3):
        img[ch][mask] = params["lesion_color"][ch] + 0.06 * lesion_tex[mask]

    overlay = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(overlay)
    for h in params.get("hairs", []):
        pts = []
        for t in np.linspace(0.0, 1.0, 4 * size // 16 + 8):
            p = ((1 - t) ** 2 * h["p0"] + 2 * (1 - t) * t * h["ctrl"] + t**2 * h["p1"])
            pts.append((float(p[1]), float(p[0])))
        draw.line(pts, fill=255, width=1)
    if "ruler_row" in params:
        row = params["ruler_row"]
        for x in range(size // 10, size - size // 10, max(size // 16, 4)):
            draw.line([(x, row), (x, row + size // 20)], fill=255, width=1)
    stroke = np.asarray(overlay, dtype=bool)
    img[:, stroke] = 0.12  # dark occluders, deliberately outside the mask

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, mask.astype(np.uint8)[None]


def synth_generate(n: int, size: int, seed: int) -> list[SegmentationSample]:
    """Deterministic synthetic dermoscopy-like corpus: textured skin,
    1-2 irregular lesion blobs, optional hair strokes and ruler ticks."""
    samples = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        params = _sample_params(rng, size)
        image, mask = _render(params, size)
        samples.append(SegmentationSample(f"synth_{seed}_{i:04d}", image, mask))
    return samples


def synth_write(samples: Sequence[SegmentationSample], outdir):
    """Write a synthetic corpus in the standard on-disk layout."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        arr = (s.image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(outdir / "images" / f"{s.id}.png")
        Image.fromarray(s.mask[0] * 255).save(outdir / "masks" / f"{s.id}{MASK_SUFFIX}")
        lines.append(f"{s.id}\ttrain")
    (outdir / "manifest.tsv").write_text("".join(f"{ln}\n" for ln in lines))


# -- batching -----------------------------------------------------------

def batch_iter(ids: Sequence[str], loader: Callable[[str], SegmentationSample],
               batch_size: int, seed: int = 0, shuffle: bool = True,
               ) -> Iterator[tuple[list[str], np.ndarray, np.ndarray]]:
    """Yield (ids, images [B,3,S,S], masks [B,1,S,S]); the final partial
    batch is included. Fixed seed + shuffle gives a fixed epoch order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(ids)
    if shuffle:
        order = [order[i] for i in np.random.default_rng(seed).permutation(len(order))]
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        samples = [loader(sid) for sid in chunk]
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples])
        yield chunk, images, masks
