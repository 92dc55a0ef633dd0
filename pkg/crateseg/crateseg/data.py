"""
Synthetic shapes-on-texture dataset with ground-truth foreground masks.

Each image holds one textured foreground shape on a striped, noisy
background; the class is the shape family. Samples are generated
independently from ``default_rng([seed, index])`` so any subset can be
regenerated bit-identically.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .exceptions import ConfigurationError
from .images import read_image, read_mask, write_image, write_mask

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = ("disk", "triangle", "cross", "square", "diamond")

# area of each family as a multiple of r^2, r being the half-extent
AREA_COEFFICIENTS = {
    "disk": np.pi,
    "triangle": 2.0,
    "cross": 20.0 / 9.0,
    "square": 4.0,
    "diamond": 2.0,
}

MANIFEST = "manifest.json"
PLACEMENTS = 10


@dataclass
class SynthDataConfig:
    """
    Parameters of the synthetic dataset.

    Attributes
    ----------
    num_classes : int
        Number of shape families used, taken in order from SHAPE_FAMILIES.
    image_size : int
        Side of the square images.
    channels : int
        1 (grayscale) or 3 (RGB).
    patch_size : int
        Patch side used to derive patch-level ground truth.
    min_area, max_area : float
        Bounds on the foreground fraction of the image.
    background_noise, foreground_noise : float
        Standard deviation of the per-pixel Gaussian texture noise.
    stripe_contrast : float
        Amplitude of the background stripe texture.
    jitter : float
        Fraction of the free canvas the shape center may move over; 0 centers every shape.
    test_fraction : float
        Trailing fraction of samples assigned to the test split on export.
    seed : int
    """
    num_classes: int = 3
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    min_area: float = 0.10
    max_area: float = 0.50
    background_noise: float = 0.08
    foreground_noise: float = 0.05
    stripe_contrast: float = 0.15
    jitter: float = 1.0
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 2 <= self.num_classes <= len(SHAPE_FAMILIES):
            raise ConfigurationError(
                f"num_classes must be between 2 and {len(SHAPE_FAMILIES)}, got {self.num_classes}"
            )
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size < 4 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size} (image_size >= 4)"
            )
        if not 0 < self.min_area < self.max_area <= 0.75:
            raise ConfigurationError(
                f"Area bounds must satisfy 0 < min_area < max_area <= 0.75, got {self.min_area}, {self.max_area}"
            )
        if not 0 <= self.jitter <= 1:
            raise ConfigurationError(f"jitter must lie in [0, 1], got {self.jitter}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigurationError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")

    @property
    def families(self) -> Tuple[str, ...]:
        return SHAPE_FAMILIES[: self.num_classes]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        side = self.image_size // self.patch_size
        return (side, side)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthDataConfig":
        return cls(**data)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    gt_mask: np.ndarray
    patch_gt: np.ndarray
    family: str
    index: int = 0


def shape_mask(family: str, size: int, center: Tuple[float, float], radius: float) -> np.ndarray:
    """ Rasterize one shape on a size x size canvas; pixel (i, j) is sampled at its center (i + .5, j + .5) """
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    dy = rows - center[0]
    dx = cols - center[1]
    if family == "disk":
        return dx ** 2 + dy ** 2 <= radius ** 2
    if family == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if family == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    if family == "triangle":
        # apex at the top, base at the bottom: width grows linearly from 0 to 2r
        inside_rows = (dy >= -radius) & (dy <= radius)
        return inside_rows & (np.abs(dx) <= (dy + radius) / 2)
    if family == "cross":
        arm = radius / 3
        horizontal = (np.abs(dx) <= radius) & (np.abs(dy) <= arm)
        vertical = (np.abs(dy) <= radius) & (np.abs(dx) <= arm)
        return horizontal | vertical
    raise ConfigurationError(f"Unknown shape family '{family}', expected one of {SHAPE_FAMILIES}")


def patch_ground_truth(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Downsample a pixel mask to the patch grid by majority vote (coverage >= 1/2),
    row-major over patches. A nonempty mask that wins no patch marks the patch
    with the largest coverage, the lowest index on ties.
    """
    height, width = mask.shape
    coverage = mask.reshape(height // patch_size, patch_size, width // patch_size, patch_size).mean(axis=(1, 3))
    coverage = coverage.reshape(-1)
    patch_gt = coverage >= 0.5
    if mask.any() and not patch_gt.any():
        patch_gt[int(np.argmax(coverage))] = True
    return patch_gt


def _place_shape(family: str, cfg: SynthDataConfig, rng: np.random.Generator) -> np.ndarray:
    """
    A shape mask covering between ``min_area`` and ``max_area`` of the canvas.

    Each placement draws a target area and a center offset, then rescales the
    radius toward the target. Placements that miss the bounds are redrawn; if
    all of them miss, the radius of a centered shape is bisected.
    """
    size = cfg.image_size
    canvas = size * size
    span = cfg.max_area - cfg.min_area
    for _ in range(PLACEMENTS):
        target = rng.uniform(cfg.min_area + 0.25 * span, cfg.max_area - 0.25 * span)
        radius = min(np.sqrt(target * canvas / AREA_COEFFICIENTS[family]), size / 2)
        offsets = rng.uniform(-1.0, 1.0, size=2)
        for _ in range(10):
            radius = min(radius, size / 2)
            free = size / 2 - radius
            center = (size / 2 + cfg.jitter * free * offsets[0], size / 2 + cfg.jitter * free * offsets[1])
            mask = shape_mask(family, size, center, radius)
            fraction = mask.mean()
            if cfg.min_area <= fraction <= cfg.max_area:
                return mask
            radius *= np.sqrt(target / max(fraction, 1.0 / canvas))

    low, high = 0.0, size / 2
    for _ in range(60):
        radius = 0.5 * (low + high)
        mask = shape_mask(family, size, (size / 2, size / 2), radius)
        fraction = mask.mean()
        if cfg.min_area <= fraction <= cfg.max_area:
            return mask
        if fraction < cfg.min_area:
            low = radius
        else:
            high = radius
    raise ConfigurationError(
        f"Cannot fit a {family} covering {cfg.min_area}-{cfg.max_area} of a {size}x{size} image"
    )


def _texture(cfg: SynthDataConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    size = cfg.image_size
    background_color = rng.uniform(0.2, 0.8, size=cfg.channels)
    foreground_color = rng.uniform(0.0, 1.0, size=cfg.channels)
    for _ in range(100):
        if np.abs(foreground_color - background_color).mean() >= 0.3:
            break
        foreground_color = rng.uniform(0.0, 1.0, size=cfg.channels)

    rows, cols = np.mgrid[0:size, 0:size]
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 10.0)
    stripes = cfg.stripe_contrast * np.sin(2 * np.pi * (cols * np.cos(angle) + rows * np.sin(angle)) / period)
    background = (
        background_color[:, None, None]
        + stripes[None]
        + cfg.background_noise * rng.standard_normal((cfg.channels, size, size))
    )
    foreground = (
        foreground_color[:, None, None]
        + cfg.foreground_noise * rng.standard_normal((cfg.channels, size, size))
    )
    return background, foreground


def generate_sample(cfg: SynthDataConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    label = index % cfg.num_classes
    family = cfg.families[label]
    mask = _place_shape(family, cfg, rng)
    background, foreground = _texture(cfg, rng)
    image = np.clip(np.where(mask[None], foreground, background), 0.0, 1.0).astype(np.float32)
    return Sample(
        image=image,
        label=label,
        gt_mask=mask,
        patch_gt=patch_ground_truth(mask, cfg.patch_size),
        family=family,
        index=index,
    )


def generate_dataset(cfg: SynthDataConfig, count: int, progress: bool = False) -> List[Sample]:
    """ Generate ``count`` samples; classes cycle so the set is balanced """
    if count <= 0:
        raise ConfigurationError(f"Sample count must be positive, got {count}")
    indices = tqdm(range(count), desc="Generating samples", disable=not progress)
    samples = [generate_sample(cfg, i) for i in indices]
    logger.info("Generated %d samples over families %s", count, ", ".join(cfg.families))
    return samples


def add_pixel_noise(
    image: np.ndarray, std: float, fraction: float = 0.5, seed: int = 0
) -> np.ndarray:
    """ Add Gaussian noise of standard deviation ``std`` to a random ``fraction`` of pixel locations """
    if not 0 <= fraction <= 1:
        raise ConfigurationError(f"Noise fraction must lie in [0, 1], got {fraction}")
    if std < 0:
        raise ConfigurationError(f"Noise standard deviation must be nonnegative, got {std}")
    rng = np.random.default_rng(seed)
    image = np.asarray(image, dtype=np.float32)
    selected = rng.random(image.shape[-2:]) < fraction
    noise = std * rng.standard_normal(image.shape)
    return np.clip(image + noise * selected, 0.0, 1.0).astype(np.float32)


def split_of(index: int, count: int, test_fraction: float) -> str:
    num_test = int(round(count * test_fraction))
    return "test" if index >= count - num_test else "train"


def export_dataset(samples: List[Sample], directory: Union[str, Path], cfg: SynthDataConfig) -> Path:
    """
    Write a dataset directory: images/NNNNN.ppm (or .pgm), masks/NNNNN.pgm
    and manifest.json listing label, family and split of every sample.
    """
    directory = Path(directory)
    count = len(samples)
    entries = []
    for position, sample in enumerate(samples):
        suffix = ".ppm" if sample.image.shape[0] == 3 else ".pgm"
        image_name = f"images/{sample.index:05d}{suffix}"
        mask_name = f"masks/{sample.index:05d}.pgm"
        write_image(sample.image, directory / image_name)
        write_mask(sample.gt_mask, directory / mask_name)
        entries.append({
            "index": sample.index,
            "image": image_name,
            "mask": mask_name,
            "label": sample.label,
            "family": sample.family,
            "split": split_of(position, count, cfg.test_fraction),
        })
    manifest = {"config": cfg.to_dict(), "count": count, "samples": entries}
    with open(directory / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("Exported %d samples to %s", count, directory)
    return directory / MANIFEST


def load_dataset(directory: Union[str, Path], split: Optional[str] = None) -> Tuple[List[Sample], SynthDataConfig]:
    """ Read a dataset directory written by export_dataset, optionally keeping one split """
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise ConfigurationError(f"No dataset manifest found at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg = SynthDataConfig.from_dict(manifest["config"])
    if split not in (None, "train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got '{split}'")
    samples = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        mask = read_mask(directory / entry["mask"])
        samples.append(Sample(
            image=read_image(directory / entry["image"]),
            label=entry["label"],
            gt_mask=mask,
            patch_gt=patch_ground_truth(mask, cfg.patch_size),
            family=entry["family"],
            index=entry["index"],
        ))
    logger.info("Loaded %d samples from %s", len(samples), directory)
    return samples, cfg
