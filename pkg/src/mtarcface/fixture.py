"""Procedural face-like dataset used as a stand-in for real aligned face crops.

Each identity gets a fixed appearance (skin tone, eye/brow/mouth shape, and a
low-frequency texture over the whole face); each image adds a sub-pixel shift,
a brightness change and pixel noise.  Eyes, nose and mouth sit on the canonical
alignment template so the mask geometry applies unchanged.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .datamodel import AlignedFace, DatasetManifest, load_manifest, write_face, write_pairs_file
from .maskgen import CANONICAL_LANDMARKS

_IDENTITY_TAG = 0x1D
_IMAGE_TAG = 0x1A
_PAIRS_TAG = 0x9A


def identity_name(k: int) -> str:
    return f"id_{k:04d}"


def _value_noise(rng, size, cells, channels):
    lattice = rng.uniform(-1, 1, (cells + 1, cells + 1, channels))
    g = (np.arange(size) + 0.5) / size * cells
    i = np.minimum(g.astype(int), cells - 1)
    f = g - i
    f = f * f * (3 - 2 * f)
    rows = lattice[i] * (1 - f)[:, None, None] + lattice[i + 1] * f[:, None, None]
    return rows[:, i] * (1 - f)[None, :, None] + rows[:, i + 1] * f[None, :, None]


def _identity_traits(seed: int, k: int, size: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([_IDENTITY_TAG, int(seed), int(k)]))
    return {
        "skin": rng.uniform([120, 80, 60], [235, 200, 175]),
        "background": rng.uniform(20, 90, 3),
        "texture": 38.0 * _value_noise(rng, size, 5, 3),
        "eye_radius": rng.uniform(0.045, 0.075),
        "eye_color": rng.uniform(0, 110, 3),
        "brow_lift": rng.uniform(0.06, 0.11),
        "brow_tilt": rng.uniform(-0.04, 0.04),
        "brow_color": rng.uniform(10, 90, 3),
        "mouth_width": rng.uniform(0.7, 1.3),
        "mouth_color": rng.uniform([110, 20, 30], [220, 110, 120]),
        "mouth_thick": rng.uniform(0.02, 0.045),
        "chin_mark": rng.uniform(-50, 50, 3),
        "chin_offset": rng.uniform(-0.12, 0.12),
        "face_rx": rng.uniform(0.36, 0.44),
    }


def render_face(traits: dict, rng: np.random.Generator, size: int) -> np.ndarray:
    shift = rng.uniform(-1.0, 1.0, 2) / size
    c = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(c - shift[0], c - shift[1])
    img = np.broadcast_to(traits["background"], (size, size, 3)).copy()

    face = ((xx - 0.5) / traits["face_rx"]) ** 2 + ((yy - 0.56) / 0.47) ** 2 <= 1.0
    img[face] = traits["skin"] + traits["texture"][face]

    lm = CANONICAL_LANDMARKS
    for ex, ey in lm[:2]:
        side = 1 if ex > 0.5 else -1
        eye = ((xx - ex) / (1.4 * traits["eye_radius"])) ** 2 + ((yy - ey) / traits["eye_radius"]) ** 2 <= 1
        img[eye] = traits["eye_color"]
        by = ey - traits["brow_lift"] + side * traits["brow_tilt"] * (xx - ex) * 4
        brow = (np.abs(xx - ex) < 0.09) & (np.abs(yy - by) < 0.018)
        img[brow] = traits["brow_color"]

    nx, ny = lm[2]
    nose = (np.abs(xx - nx) < 0.02) & (yy > ny - 0.12) & (yy < ny + 0.01)
    img[nose] = 0.7 * traits["skin"]

    (lx, ly), (rx, ry) = lm[3], lm[4]
    mx, my = (lx + rx) / 2, (ly + ry) / 2
    half = (rx - lx) / 2 * traits["mouth_width"]
    mouth = (np.abs(xx - mx) < half) & (np.abs(yy - my) < traits["mouth_thick"])
    img[mouth] = traits["mouth_color"]
    chin = ((xx - 0.5 - traits["chin_offset"]) ** 2 + (yy - 0.93) ** 2) < 0.07 ** 2
    img[chin & face] += traits["chin_mark"]

    img = img * rng.uniform(0.85, 1.15) + rng.normal(0, 6.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_fixture(out_root, seed: int = 0, num_identities: int = 20, images_per_identity: int = 50,
                 size: int = 32, first_image: int = 0) -> DatasetManifest:
    """Write ``num_identities`` x ``images_per_identity`` PNG faces under ``out_root``.

    ``first_image`` offsets the per-image noise stream: a tree made with the same
    seed and ``first_image=50`` holds new photos of the same identities, which
    is how held-out evaluation data is produced.
    """
    out = Path(out_root)
    for k in range(num_identities):
        traits = _identity_traits(seed, k, size)
        ident = identity_name(k)
        for j in range(first_image, first_image + images_per_identity):
            rng = np.random.default_rng(np.random.SeedSequence([_IMAGE_TAG, int(seed), k, j]))
            pixels = render_face(traits, rng, size)
            write_face(AlignedFace(pixels, f"{ident}/{j}"), out / ident / f"{ident}_{j + 1:04d}.png")
    return load_manifest(out, check_images=False)


def make_pairs(manifest: DatasetManifest, seed: int = 0, folds: int = 10,
               pairs_per_fold: int = 60) -> list[tuple[int, int, bool]]:
    """Balanced verification pairs laid out fold by fold (positives, then negatives)."""
    if pairs_per_fold % 2:
        raise ValueError("pairs_per_fold must be even")
    rng = np.random.default_rng(np.random.SeedSequence([_PAIRS_TAG, int(seed)]))
    offsets, counts = [], []
    start = 0
    for ident in manifest.identities:
        n = len(manifest.identity_files(ident))
        offsets.append(start)
        counts.append(n)
        start += n
    multi = [i for i, n in enumerate(counts) if n >= 2]
    if not multi or manifest.num_identities < 2:
        raise ValueError("need >= 2 identities and one with >= 2 images to build pairs")
    pairs = []
    for _ in range(folds):
        for _ in range(pairs_per_fold // 2):
            k = multi[int(rng.integers(len(multi)))]
            a, b = rng.choice(counts[k], size=2, replace=False)
            pairs.append((offsets[k] + int(a), offsets[k] + int(b), True))
        for _ in range(pairs_per_fold // 2):
            ka, kb = rng.choice(manifest.num_identities, size=2, replace=False)
            a = offsets[ka] + int(rng.integers(counts[ka]))
            b = offsets[kb] + int(rng.integers(counts[kb]))
            pairs.append((a, b, False))
    return pairs


def write_fixture_pairs(manifest: DatasetManifest, path, seed: int = 0, folds: int = 10,
                        pairs_per_fold: int = 60) -> Path:
    path = Path(path)
    write_pairs_file(path, manifest, make_pairs(manifest, seed, folds, pairs_per_fold))
    return path
