"""Synthetic face-mask rendering and masked twin dataset generation.

Faces are already aligned, so the mask polygon is placed from a canonical
five-landmark template rather than detected landmarks.  Every random choice
for image ``i`` comes from a generator keyed by ``(master_seed, i)``, which
makes the output independent of processing order.
"""
from __future__ import annotations

import enum
import functools
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import AlignedFace, DatasetManifest, load_manifest, read_face, validate_twins, write_face
from .errors import DatasetError, MaskGeometryInvalid

# ArcFace 112x112 alignment targets: left eye, right eye, nose tip, mouth corners.
CANONICAL_LANDMARKS_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ]
)
CANONICAL_LANDMARKS = CANONICAL_LANDMARKS_112 / 112.0

# Nose bridge -> right cheek -> chin -> left cheek, as (x, y) fractions of the side.
DEFAULT_POLYGON = (
    (0.50, 0.52),
    (0.66, 0.545),
    (0.86, 0.59),
    (0.93, 0.71),
    (0.86, 0.86),
    (0.67, 0.95),
    (0.50, 0.975),
    (0.33, 0.95),
    (0.14, 0.86),
    (0.07, 0.71),
    (0.14, 0.59),
    (0.34, 0.545),
)

DEFAULT_JITTER = 0.02
NUM_TEXTURES = 16
MIN_AREA_FRACTION = 0.05
_TEXTURE_TAG = 0x7E47


class MaskType(str, enum.Enum):
    SURGICAL = "surgical"
    SURGICAL_GREEN = "surgical_green"
    SURGICAL_BLUE = "surgical_blue"
    N95 = "n95"
    CLOTH = "cloth"
    KN95 = "kn95"


MASK_TYPES = tuple(MaskType)

BASE_COLORS = {
    MaskType.SURGICAL: (228, 234, 238),
    MaskType.SURGICAL_GREEN: (142, 196, 168),
    MaskType.SURGICAL_BLUE: (122, 172, 214),
    MaskType.N95: (244, 242, 234),
    MaskType.CLOTH: (58, 60, 72),
    MaskType.KN95: (214, 214, 218),
}


@dataclass(frozen=True)
class MaskSpec:
    mask_type: MaskType
    apply_random_color: bool
    color_rgb: tuple[int, int, int] | None
    apply_random_texture: bool
    texture_id: int | None
    jitter: tuple[float, float]

    def __post_init__(self):
        if self.apply_random_color != (self.color_rgb is not None):
            raise ValueError("color_rgb must be present exactly when apply_random_color is set")
        if self.apply_random_texture != (self.texture_id is not None):
            raise ValueError("texture_id must be present exactly when apply_random_texture is set")

    @property
    def fill_color(self) -> tuple[int, int, int]:
        return self.color_rgb if self.apply_random_color else BASE_COLORS[self.mask_type]


@dataclass(frozen=True)
class MaskGeometry:
    polygon: tuple[tuple[float, float], ...] = DEFAULT_POLYGON
    anchor_points: tuple[tuple[float, float], ...] = tuple(map(tuple, CANONICAL_LANDMARKS))

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=float)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise MaskGeometryInvalid("polygon needs at least three 2D points")
        if poly.min() < 0.0 or poly.max() > 1.0:
            raise MaskGeometryInvalid("polygon must lie inside the unit square")
        anchors = np.asarray(self.anchor_points, dtype=float)
        # nose tip and both mouth corners
        if not points_in_polygon(anchors[2:5], poly).all():
            raise MaskGeometryInvalid("polygon must cover the nose tip and both mouth corners")

    def placed(self, jitter_px, size: int) -> np.ndarray:
        """Polygon vertices in pixel units after jitter and clamping to the image."""
        poly = np.asarray(self.polygon, dtype=float) * size
        poly = poly + np.asarray(jitter_px, dtype=float)
        return np.clip(poly, 0.0, float(size))


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd rule containment test, vectorized over ``points``."""
    x = points[..., 0][..., None]
    y = points[..., 1][..., None]
    x0, y0 = polygon[:, 0], polygon[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddles = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossings = straddles & (x < x_cross)
    return (crossings.sum(axis=-1) % 2) == 1


def polygon_area(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rasterize(geometry: MaskGeometry, size: int, jitter_px=(0.0, 0.0)) -> np.ndarray:
    """Boolean (size, size) coverage of pixel centres by the placed polygon."""
    poly = geometry.placed(jitter_px, size)
    if polygon_area(poly) < MIN_AREA_FRACTION * size * size:
        raise MaskGeometryInvalid(
            f"mask polygon area {polygon_area(poly):.1f}px is below {MIN_AREA_FRACTION:.0%} of the image"
        )
    centres = np.arange(size) + 0.5
    xx, yy = np.meshgrid(centres, centres)
    return points_in_polygon(np.stack([xx, yy], axis=-1), poly)


def spec_rng(master_seed: int, image_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(image_index)]))


def sample_mask_spec(rng: np.random.Generator, jitter_px: float = 0.0) -> MaskSpec:
    """Draw a mask spec; ``jitter_px`` is the maximum offset J in pixels."""
    mask_type = MASK_TYPES[int(rng.integers(len(MASK_TYPES)))]
    apply_color = bool(rng.random() < 0.5)
    color = tuple(int(c) for c in rng.integers(0, 256, size=3)) if apply_color else None
    apply_texture = bool(rng.random() < 0.5)
    texture_id = int(rng.integers(NUM_TEXTURES)) if apply_texture else None
    jitter = tuple(float(j) for j in rng.uniform(-jitter_px, jitter_px, size=2))
    return MaskSpec(mask_type, apply_color, color, apply_texture, texture_id, jitter)


@functools.lru_cache(maxsize=128)
def texture_pattern(texture_id: int, size: int) -> np.ndarray:
    """Procedural shading pattern in [0, 1]: even ids are stripes, odd ids speckle."""
    rng = np.random.default_rng(np.random.SeedSequence([_TEXTURE_TAG, texture_id]))
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    # low-frequency value noise, bilinearly upsampled from an 8x8 lattice
    lattice = rng.random((9, 9))
    gx, gy = xx * 8, yy * 8
    ix, iy = np.minimum(gx.astype(int), 7), np.minimum(gy.astype(int), 7)
    fx, fy = gx - ix, gy - iy
    noise = (
        lattice[iy, ix] * (1 - fx) * (1 - fy)
        + lattice[iy, ix + 1] * fx * (1 - fy)
        + lattice[iy + 1, ix] * (1 - fx) * fy
        + lattice[iy + 1, ix + 1] * fx * fy
    )
    if texture_id % 2 == 0:
        angle = np.pi * (texture_id // 2) / 8
        period = 0.08 + 0.04 * rng.random()
        phase = (xx * np.cos(angle) + yy * np.sin(angle)) / period
        pattern = 0.7 * (0.5 + 0.5 * np.sin(2 * np.pi * phase)) + 0.3 * noise
    else:
        speckle = rng.random((size, size))
        pattern = 0.5 * noise + 0.5 * (speckle > 0.6)
    return np.clip(pattern, 0.0, 1.0)


def mask_fill(spec: MaskSpec, size: int) -> np.ndarray:
    """(size, size, 3) uint8 fill image for ``spec``."""
    color = np.asarray(spec.fill_color, dtype=float)
    fill = np.broadcast_to(color, (size, size, 3)).copy()
    if spec.apply_random_texture:
        shade = 0.6 + 0.4 * texture_pattern(spec.texture_id, size)
        fill = fill * shade[..., None]
    return np.clip(np.rint(fill), 0, 255).astype(np.uint8)


def apply_mask(face: AlignedFace, spec: MaskSpec, geometry: MaskGeometry | None = None) -> AlignedFace:
    geometry = geometry or MaskGeometry()
    coverage = rasterize(geometry, face.size, spec.jitter)
    pixels = face.pixels.copy()
    pixels[coverage] = mask_fill(spec, face.size)[coverage]
    return AlignedFace(pixels, face.source_id)


def mask_image(face: AlignedFace, master_seed: int, image_index: int, jitter: float = DEFAULT_JITTER,
               geometry: MaskGeometry | None = None) -> AlignedFace:
    """Mask one face with the spec keyed by ``(master_seed, image_index)``.

    ``jitter`` is a fraction of the image side.
    """
    spec = sample_mask_spec(spec_rng(master_seed, image_index), jitter * face.size)
    return apply_mask(face, spec, geometry)


def _mask_file(job):
    src, dst, seed, index, size, jitter = job
    face = read_face(src)
    if size is not None and face.size != size:
        raise DatasetError(f"{src}: expected {size}x{size} face, got {face.size}x{face.size}")
    write_face(mask_image(face, seed, index, jitter), dst)


def build_masked_twin(manifest: DatasetManifest, master_seed: int, out_root, size: int | None = None,
                      jitter: float = DEFAULT_JITTER, workers: int = 1) -> DatasetManifest:
    """Write a filename-mirrored masked copy of ``manifest`` under ``out_root``.

    Any image whose mask cannot be rendered aborts the whole build: a partial
    twin would break the mirroring contract.
    """
    out = Path(out_root)
    if out.resolve() == Path(manifest.root_path).resolve():
        raise DatasetError("masked twin output must differ from the input root")
    if out.exists():
        # stale files from an earlier run would break exact mirroring
        for ident_dir in out.iterdir():
            if ident_dir.is_dir() and ident_dir.name not in manifest.identities:
                shutil.rmtree(ident_dir)
    jobs = [
        (manifest.path(i), out / rel, master_seed, i, size, jitter)
        for i, rel in enumerate(manifest.files)
    ]
    try:
        out.mkdir(parents=True, exist_ok=True)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_mask_file, jobs, chunksize=32))
        else:
            for job in jobs:
                _mask_file(job)
    except OSError as exc:
        raise DatasetError(f"failed writing masked twin to {out}: {exc}") from exc
    for ident in manifest.identities:
        keep = {Path(p).name for p in manifest.identity_files(ident)}
        for extra in (out / ident).glob("*.png"):
            if extra.name not in keep:
                extra.unlink()
    twin = load_manifest(out, masked_twin=True, check_images=False)
    validate_twins(manifest, twin)
    return twin
