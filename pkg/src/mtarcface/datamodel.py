"""Core records, the one-directory-per-identity dataset layout and pairs files.

A dataset tree looks like ``<root>/<identity>/<image>.png``.  Identity labels
are assigned from the lexicographic order of the identity directory names and
images are ordered lexicographically inside each identity, which fixes the
global image index used by the augmentation and sampling RNG keys.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, PairsFileError, TwinMismatch

FACE_SIZES = (32, 64, 112)
IMAGE_SUFFIX = ".png"
MANIFEST_SIDECAR = "manifest.json"


@dataclass(frozen=True, eq=False)
class AlignedFace:
    """A square RGB crop in canonical alignment."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.shape[0] != px.shape[1]:
            raise ValueError(f"face crop must be square, got {px.shape[:2]}")
        if px.shape[0] not in FACE_SIZES:
            raise ValueError(f"face size {px.shape[0]} not in {FACE_SIZES}")
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AlignedFace):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class SampleRecord:
    face: AlignedFace
    identity_label: int
    mask_flag: int

    def __post_init__(self):
        if self.identity_label < 0:
            raise ValueError("identity_label must be non-negative")
        if self.mask_flag not in (0, 1):
            raise ValueError(f"mask_flag must be 0 or 1, got {self.mask_flag}")


@dataclass(frozen=True)
class VerificationPair:
    face_a: AlignedFace
    face_b: AlignedFace
    same_identity: bool


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset tree.

    ``files`` holds root-relative paths in global image order and ``labels``
    the identity label of each file.
    """

    root_path: str
    identities: tuple[str, ...]
    files: tuple[str, ...]
    labels: tuple[int, ...]
    masked_twin: bool = False
    _per_identity: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        per_identity = {}
        for path in self.files:
            ident = path.split("/", 1)[0]
            per_identity.setdefault(ident, []).append(path)
        object.__setattr__(self, "_per_identity", per_identity)

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    @property
    def num_images(self) -> int:
        return len(self.files)

    @property
    def label_map(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.identities)}

    def identity_files(self, identity: str) -> list[str]:
        try:
            return self._per_identity[identity]
        except KeyError:
            raise DatasetError(f"identity {identity!r} not in dataset {self.root_path}") from None

    def path(self, index: int) -> Path:
        return Path(self.root_path) / self.files[index]

    def load_face(self, index: int) -> AlignedFace:
        return read_face(self.path(index), source_id=self.files[index])

    def load_pixels(self) -> np.ndarray:
        """All images stacked as an (N, H, W, 3) uint8 array."""
        return np.stack([self.load_face(i).pixels for i in range(self.num_images)])

    def to_json(self) -> dict:
        return {
            "C": self.num_identities,
            "N": self.num_images,
            "masked_twin": self.masked_twin,
            "labels": self.label_map,
        }


def read_face(path, source_id: str | None = None) -> AlignedFace:
    path = Path(path)
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return AlignedFace(pixels, source_id if source_id is not None else str(path))


def write_face(face: AlignedFace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # PNG keeps augmentation lossless; Pillow writes no timestamps by default.
    Image.fromarray(face.pixels, mode="RGB").save(path, format="PNG", optimize=False)


def resolve_data_path(path) -> Path:
    """Resolve a relative dataset path against ``MTARCFACE_DATA_DIR`` when set."""
    path = Path(path)
    base = os.environ.get("MTARCFACE_DATA_DIR")
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def load_manifest(root_path, masked_twin: bool = False, check_images: bool = True) -> DatasetManifest:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist or is not a directory")
    identities = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not identities:
        raise DatasetError(f"dataset root {root} has no identity directories")
    files, labels = [], []
    for label, ident in enumerate(identities):
        names = sorted(
            p.name for p in (root / ident).iterdir() if p.is_file() and p.suffix.lower() == IMAGE_SUFFIX
        )
        if not names:
            raise DatasetError(f"identity directory {root / ident} contains no images")
        for name in names:
            if check_images:
                _check_image(root / ident / name)
            files.append(f"{ident}/{name}")
            labels.append(label)
    return DatasetManifest(
        root_path=str(root),
        identities=tuple(identities),
        files=tuple(files),
        labels=tuple(labels),
        masked_twin=masked_twin,
    )


def _check_image(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except Exception as exc:  # Pillow raises a zoo of types on corrupt files
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def save_manifest_json(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else Path(manifest.root_path) / MANIFEST_SIDECAR
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def validate_twins(original: DatasetManifest, masked: DatasetManifest) -> None:
    """Raise :class:`TwinMismatch` unless both trees mirror each other file for file."""
    if original.identities != masked.identities:
        missing = sorted(set(original.identities) ^ set(masked.identities))
        raise TwinMismatch(f"identity sets differ: {missing[:5]}")
    if original.files != masked.files:
        diff = sorted(set(original.files) ^ set(masked.files))
        raise TwinMismatch(f"file lists differ, e.g. {diff[:5]}")


def parse_pairs_file(path, manifest: DatasetManifest, load: bool = True) -> list[VerificationPair]:
    """Parse an LFW-style pairs file against ``manifest``.

    Lines are ``<id> <a> <b>`` for a positive pair or ``<id_a> <a> <id_b> <b>``
    for a negative one.  Image numbers are 1-based positions in the identity's
    sorted image list.  With ``load=False`` the faces are not read and the
    returned pairs hold global image indices instead (see :func:`parse_pair_indices`).
    """
    indices = parse_pair_indices(path, manifest)
    if not load:
        return indices
    cache: dict[int, AlignedFace] = {}

    def face(i):
        if i not in cache:
            cache[i] = manifest.load_face(i)
        return cache[i]

    return [VerificationPair(face(a), face(b), same) for a, b, same in indices]


def parse_pair_indices(path, manifest: DatasetManifest) -> list[tuple[int, int, bool]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PairsFileError(f"cannot read pairs file {path}: {exc}") from exc
    offsets = {}
    start = 0
    for ident in manifest.identities:
        offsets[ident] = start
        start += len(manifest.identity_files(ident))

    def lookup(lineno, ident, number):
        if ident not in offsets:
            raise PairsFileError(f"{path}:{lineno}: identity {ident!r} not found in {manifest.root_path}")
        try:
            k = int(number)
        except ValueError:
            raise PairsFileError(f"{path}:{lineno}: image number {number!r} is not an integer") from None
        count = len(manifest.identity_files(ident))
        if not 1 <= k <= count:
            raise PairsFileError(
                f"{path}:{lineno}: image {ident} #{k} not found (identity has {count} images)"
            )
        return offsets[ident] + k - 1

    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) == 3:
            ident, a, b = tokens
            pairs.append((lookup(lineno, ident, a), lookup(lineno, ident, b), True))
        elif len(tokens) == 4:
            id_a, a, id_b, b = tokens
            pairs.append((lookup(lineno, id_a, a), lookup(lineno, id_b, b), False))
        else:
            raise PairsFileError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(tokens)}")
    return pairs


def write_pairs_file(path, manifest: DatasetManifest, pairs) -> None:
    """Write ``(global_a, global_b, same)`` index triples in the pairs format."""
    ident_of, number_of = [], []
    for ident in manifest.identities:
        for k, _ in enumerate(manifest.identity_files(ident), start=1):
            ident_of.append(ident)
            number_of.append(k)
    lines = []
    for a, b, same in pairs:
        if same:
            lines.append(f"{ident_of[a]} {number_of[a]} {number_of[b]}")
        else:
            lines.append(f"{ident_of[a]} {number_of[a]} {ident_of[b]} {number_of[b]}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
