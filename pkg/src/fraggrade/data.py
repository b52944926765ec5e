"""Samples, dataset splits, synthetic embryo phantoms and preprocessing.

Phantoms stand in for microscopy: a bright textured disc (embryo) carrying
brighter fragment blobs, darker unlabelled granules and Gaussian noise. The
fragment ratio is always recomputed from the emitted masks, so every stored
ratio is exact.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .grading import BOUNDARIES, Grade, grade_to_interval, mask_to_ratio, ratio_to_grade

log = logging.getLogger(__name__)

TARGET_SIZE = 299


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    fragment_mask: Optional[np.ndarray] = None
    embryo_mask: Optional[np.ndarray] = None
    grade: Optional[Grade] = None
    ratio: Optional[float] = None

    @property
    def is_paired(self) -> bool:
        return self.fragment_mask is not None

    def validate(self) -> None:
        shape = self.image.shape
        if self.image.ndim != 2:
            raise ValueError(f"{self.id}: image must be 2-D, got {shape}")
        for name in ("fragment_mask", "embryo_mask"):
            m = getattr(self, name)
            if m is not None and m.shape != shape:
                raise ValueError(f"{self.id}: {name} shape {m.shape} != image {shape}")
        if self.fragment_mask is not None:
            if self.embryo_mask is None or self.ratio is None:
                raise ValueError(f"{self.id}: fragment mask requires embryo mask and ratio")
            if np.any(self.fragment_mask & ~self.embryo_mask):
                raise ValueError(f"{self.id}: fragment pixels outside embryo")
            r = mask_to_ratio(self.fragment_mask, self.embryo_mask)
            if abs(r - self.ratio) > 1e-9:
                raise ValueError(f"{self.id}: stored ratio {self.ratio} != counted {r}")
        if self.grade is not None and self.ratio is not None:
            if self.ratio not in grade_to_interval(self.grade):
                raise ValueError(f"{self.id}: ratio {self.ratio} outside grade {self.grade.value}")

    def strip_to_weak(self) -> "ImageSample":
        return ImageSample(id=self.id, image=self.image, grade=self.grade)


@dataclass
class DatasetSplit:
    paired: list[ImageSample] = field(default_factory=list)
    weak: list[ImageSample] = field(default_factory=list)
    val: list[ImageSample] = field(default_factory=list)

    def validate(self) -> None:
        ids = [s.id for s in self.paired + self.weak + self.val]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids are not unique across the split")
        for s in self.paired + self.val:
            if s.fragment_mask is None or s.grade is None or s.ratio is None:
                raise ValueError(f"{s.id}: paired/val samples need masks, grade and ratio")
        for s in self.weak:
            if s.grade is None or s.fragment_mask is not None:
                raise ValueError(f"{s.id}: weak samples carry a grade and no mask")
        for s in self.paired + self.weak + self.val:
            s.validate()


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = TARGET_SIZE
    embryo_radius_range: tuple[float, float] = (0.28, 0.38)
    fragment_count_range: tuple[int, int] = (2, 10)
    fragment_radius_range: tuple[float, float] = (0.08, 0.30)
    noise_std: float = 0.04
    texture_granularity: float = 3.0
    seed: int = 0
    granule_count_range: tuple[int, int] = (0, 8)
    ratio_tolerance: float = 0.02
    max_attempts: int = 5000

    def __post_init__(self):
        for name in ("embryo_radius_range", "fragment_count_range",
                     "fragment_radius_range", "granule_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not (0 < self.embryo_radius_range[0] and self.embryo_radius_range[1] < 0.5):
            raise ValueError("embryo radius must be a fraction in (0, 0.5)")


class PhantomError(RuntimeError):
    pass


def _disc(shape, cy, cx, r):
    """Boolean disc, computed only inside its bounding box."""
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    y0, y1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, h)
    x0, x1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return out
    yy, xx = np.ogrid[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return out


def _place_fragments(rng, embryo, radius, target, cfg: PhantomConfig):
    """Add/remove blobs inside the embryo until the counted ratio hits target."""
    area = int(embryo.sum())
    frag = np.zeros_like(embryo)
    if target <= 0:
        return frag
    # aim tighter than the tolerance so the grade of the result matches the target's
    aim = max(cfg.ratio_tolerance / 4, 1.0 / area)
    n_blobs = rng.integers(cfg.fragment_count_range[0], cfg.fragment_count_range[1] + 1)
    n_blobs = max(int(n_blobs), 1)
    lo, hi = cfg.fragment_radius_range
    base_r = math.sqrt(target * area / (n_blobs * math.pi))
    base_r = float(np.clip(base_r, lo * radius, hi * radius))

    blobs: list[np.ndarray] = []
    covered = 0
    best = (abs(target), 0.0, frag.copy())
    for _ in range(cfg.max_attempts):
        ratio = covered / area
        err = ratio - target
        if abs(err) < best[0]:
            best = (abs(err), ratio, frag.copy())
        if abs(err) <= aim:
            return frag
        if err < 0:
            free = np.flatnonzero(embryo & ~frag)
            if free.size == 0:
                break
            cy, cx = np.unravel_index(free[rng.integers(free.size)], embryo.shape)
            r = base_r * rng.uniform(0.7, 1.3)
            need = (target - ratio) * area
            while True:
                blob = _disc(embryo.shape, cy, cx, r) & embryo
                added = int((blob & ~frag).sum())
                if added <= need + aim * area or r <= 0.5:
                    break
                r *= 0.75
            blobs.append(blob)
            frag |= blob
        else:
            blobs.pop(int(rng.integers(len(blobs))))
            frag = np.zeros_like(embryo)
            for b in blobs:
                frag |= b
        covered = int(frag.sum())
    if best[0] <= cfg.ratio_tolerance:
        return best[2]
    raise PhantomError(f"could not reach ratio {target:.4f}; best achieved {best[1]:.4f}")


def generate_phantom(config: PhantomConfig, target_ratio: float, sample_id: str = "phantom") -> ImageSample:
    """Render one phantom whose pixel-counted ratio is within tolerance of target_ratio.

    Deterministic in (config.seed, target_ratio).
    """
    if not 0.0 <= target_ratio <= 1.0:
        raise ValueError(f"target_ratio must be in [0, 1], got {target_ratio}")
    rng = np.random.default_rng(config.seed)
    s = config.image_size
    shape = (s, s)

    radius = rng.uniform(*config.embryo_radius_range) * s
    slack = s / 2 - radius - 2
    cy, cx = s / 2 + rng.uniform(-0.3, 0.3, size=2) * max(slack, 0)
    embryo = _disc(shape, cy, cx, radius)

    frag = _place_fragments(rng, embryo, radius, float(target_ratio), config)

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), config.texture_granularity)
    texture /= texture.std() + 1e-12
    img = np.full(shape, 0.08)
    img[embryo] = 0.50 + 0.06 * texture[embryo]
    n_gran = rng.integers(config.granule_count_range[0], config.granule_count_range[1] + 1)
    for _ in range(int(n_gran)):
        inside = np.flatnonzero(embryo & ~frag)
        if inside.size == 0:
            break
        gy, gx = np.unravel_index(inside[rng.integers(inside.size)], shape)
        g = _disc(shape, gy, gx, rng.uniform(0.02, 0.05) * radius) & embryo & ~frag
        img[g] = 0.32
    img[frag] = 0.85 + 0.04 * texture[frag]
    img = ndimage.gaussian_filter(img, 0.8)
    if config.noise_std > 0:
        img = img + rng.normal(0.0, config.noise_std, shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    ratio = mask_to_ratio(frag, embryo)
    return ImageSample(
        id=sample_id, image=img, fragment_mask=frag, embryo_mask=embryo,
        grade=ratio_to_grade(ratio), ratio=ratio,
    )


# the top of grade D is capped so phantoms keep visible unfragmented cytoplasm
_SAMPLER_MARGIN = 0.01
_SAMPLER_D_MAX = 0.9


def stratified_ratio(rng: np.random.Generator, index: int) -> float:
    """Cycle through grades A-D by index, uniform within each interval."""
    g = list(Grade)[index % 4]
    iv = grade_to_interval(g)
    hi = min(iv.y_max, _SAMPLER_D_MAX)
    return float(rng.uniform(iv.y_min + _SAMPLER_MARGIN, hi - _SAMPLER_MARGIN))


RatioSampler = Callable[[np.random.Generator, int], float]


def _sub_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_split(
    n_paired: int,
    n_weak: int,
    n_val: int,
    config: PhantomConfig,
    ratio_sampler: Optional[RatioSampler] = None,
    workers: int = 1,
) -> DatasetSplit:
    """Generate paired, weak (grade-only) and validation phantoms.

    Sample i derives its own seed from (config.seed, i), so any worker count
    yields the same split.
    """
    if min(n_paired, n_weak, n_val) < 0:
        raise ValueError("sample counts must be >= 0")
    sampler = ratio_sampler or stratified_ratio
    jobs = (
        [("paired", i) for i in range(n_paired)]
        + [("weak", i) for i in range(n_weak)]
        + [("val", i) for i in range(n_val)]
    )

    def make(job_index: int) -> ImageSample:
        kind, i = jobs[job_index]
        seed = _sub_seed(config.seed, job_index)
        target = sampler(np.random.default_rng([seed, 1]), i)
        sample = generate_phantom(replace(config, seed=seed), target, f"{kind}-{i:05d}")
        return sample.strip_to_weak() if kind == "weak" else sample

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(make, range(len(jobs))))
    else:
        samples = [make(k) for k in range(len(jobs))]
    split = DatasetSplit(
        paired=samples[:n_paired],
        weak=samples[n_paired:n_paired + n_weak],
        val=samples[n_paired + n_weak:],
    )
    split.validate()
    return split


# -- preprocessing ----------------------------------------------------------

@dataclass(frozen=True)
class PadRecord:
    """Geometry of an aspect-preserving resize + zero pad; replayable on masks."""

    in_shape: tuple[int, int]
    scale: float
    content_shape: tuple[int, int]
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    size: int = TARGET_SIZE


def pad_record_for(shape: Sequence[int], size: int = TARGET_SIZE) -> PadRecord:
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise ValueError(f"image must be at least 1x1, got {h}x{w}")
    # integer arithmetic: the long side lands exactly on `size`
    if h >= w:
        ch, cw = size, max(1, (w * size) // h)
        scale = size / h
    else:
        ch, cw = max(1, (h * size) // w), size
        scale = size / w
    ph, pw = size - ch, size - cw
    return PadRecord(
        in_shape=(h, w), scale=scale, content_shape=(ch, cw),
        pad_top=ph // 2, pad_bottom=ph - ph // 2,
        pad_left=pw // 2, pad_right=pw - pw // 2, size=size,
    )


def apply_pad_record(arr: np.ndarray, record: PadRecord, nearest: bool = False) -> np.ndarray:
    """Replay a PadRecord: bilinear for images, nearest-neighbour for masks."""
    arr = np.asarray(arr)
    if arr.shape != record.in_shape:
        raise ValueError(f"array shape {arr.shape} does not match record {record.in_shape}")
    ch, cw = record.content_shape
    is_bool = arr.dtype == bool
    if (ch, cw) == arr.shape:
        content = arr.astype(np.float32)
    else:
        resample = Image.NEAREST if nearest else Image.BILINEAR
        img = Image.fromarray(arr.astype(np.float32), mode="F")
        content = np.asarray(img.resize((cw, ch), resample=resample), dtype=np.float32)
    out = np.zeros((record.size, record.size), dtype=np.float32)
    out[record.pad_top:record.pad_top + ch, record.pad_left:record.pad_left + cw] = content
    if is_bool:
        return out > 0.5
    return out


def preprocess(image: np.ndarray, size: int = TARGET_SIZE) -> tuple[np.ndarray, PadRecord]:
    record = pad_record_for(np.shape(image), size)
    return apply_pad_record(image, record), record


def preprocess_sample(sample: ImageSample, size: int = TARGET_SIZE) -> ImageSample:
    img, rec = preprocess(sample.image, size)
    frag = emb = None
    ratio = sample.ratio
    if sample.fragment_mask is not None:
        frag = apply_pad_record(sample.fragment_mask.astype(bool), rec, nearest=True)
        emb = apply_pad_record(sample.embryo_mask.astype(bool), rec, nearest=True)
        frag &= emb
        ratio = mask_to_ratio(frag, emb)
    return ImageSample(sample.id, img, frag, emb, sample.grade, ratio)


def estimate_embryo_mask(image: np.ndarray) -> np.ndarray:
    """Foreground estimate: Otsu threshold on a lightly smoothed image, largest
    connected component, holes filled."""
    from skimage.filters import threshold_otsu

    smooth = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), 1.5)
    if np.ptp(smooth) == 0:
        return np.zeros(smooth.shape, dtype=bool)
    fg = smooth > threshold_otsu(smooth)
    labels, n = ndimage.label(fg)
    if n == 0:
        return fg
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)


# -- on-disk format -----------------------------------------------------------

MANIFEST = "manifest.jsonl"


def _write_png(path: Path, arr: np.ndarray, mask: bool = False) -> None:
    if mask:
        data = np.where(arr, 255, 0).astype(np.uint8)
    else:
        data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, optimize=False)


def _read_png(path: Path, mask: bool = False) -> np.ndarray:
    data = np.asarray(Image.open(path).convert("L"))
    if mask:
        return data > 127
    return (data.astype(np.float32) / 255.0)


def save_split(split: DatasetSplit, root: Path | str) -> Path:
    """Write PNGs under <root>/<split>/ and one manifest line per sample."""
    root = Path(root)
    lines = []
    for kind in ("paired", "weak", "val"):
        d = root / kind
        d.mkdir(parents=True, exist_ok=True)
        for s in getattr(split, kind):
            rec = {"id": s.id, "split": kind, "image_path": f"{kind}/{s.id}.png",
                   "fragment_mask_path": None, "embryo_mask_path": None,
                   "grade": s.grade.value if s.grade else None, "ratio": s.ratio}
            _write_png(root / rec["image_path"], s.image)
            if s.fragment_mask is not None:
                rec["fragment_mask_path"] = f"{kind}/{s.id}_frag.png"
                rec["embryo_mask_path"] = f"{kind}/{s.id}_embryo.png"
                _write_png(root / rec["fragment_mask_path"], s.fragment_mask, mask=True)
                _write_png(root / rec["embryo_mask_path"], s.embryo_mask, mask=True)
            lines.append(json.dumps(rec, sort_keys=True))
    path = root / MANIFEST
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def load_split(root: Path | str) -> DatasetSplit:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    split = DatasetSplit()
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        s = ImageSample(
            id=rec["id"],
            image=_read_png(root / rec["image_path"]),
            grade=Grade(rec["grade"]) if rec.get("grade") else None,
            ratio=rec.get("ratio"),
        )
        if rec.get("fragment_mask_path"):
            s.fragment_mask = _read_png(root / rec["fragment_mask_path"], mask=True)
            s.embryo_mask = _read_png(root / rec["embryo_mask_path"], mask=True)
        getattr(split, rec.get("split", "paired" if s.is_paired else "weak")).append(s)
    split.validate()
    return split


def grade_counts(samples: Sequence[ImageSample]) -> dict[str, int]:
    counts = {g.value: 0 for g in Grade}
    for s in samples:
        if s.grade is not None:
            counts[s.grade.value] += 1
    return counts


__all__ = [
    "BOUNDARIES", "DatasetSplit", "ImageSample", "PadRecord", "PhantomConfig", "PhantomError",
    "apply_pad_record", "build_split", "estimate_embryo_mask", "generate_phantom", "grade_counts", "load_split",
    "pad_record_for", "preprocess", "preprocess_sample", "save_split", "stratified_ratio",
]
