import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from matplotlib.path import Path as MplPath

from mtarcface.datamodel import AlignedFace, load_manifest
from mtarcface.errors import MaskGeometryInvalid
from mtarcface.fixture import make_fixture
from mtarcface.maskgen import (
    CANONICAL_LANDMARKS,
    DEFAULT_POLYGON,
    MASK_TYPES,
    MaskGeometry,
    MaskSpec,
    MaskType,
    apply_mask,
    build_masked_twin,
    rasterize,
    sample_mask_spec,
    spec_rng,
)

N_DRAWS = 60_000


@pytest.fixture(scope="module")
def draws():
    return [sample_mask_spec(spec_rng(11, i), 2.24) for i in range(N_DRAWS)]


def test_type_frequencies_uniform(draws):
    counts = Counter(s.mask_type for s in draws)
    assert set(counts) == set(MASK_TYPES)
    for t in MASK_TYPES:
        assert abs(counts[t] / N_DRAWS - 1 / 6) <= 0.01


def test_color_and_texture_flags(draws):
    color = np.mean([s.apply_random_color for s in draws])
    texture = np.mean([s.apply_random_texture for s in draws])
    assert 0.49 <= color <= 0.51
    assert 0.49 <= texture <= 0.51
    # independence: joint frequency close to 1/4
    both = np.mean([s.apply_random_color and s.apply_random_texture for s in draws])
    assert abs(both - 0.25) < 0.01


def test_spec_fields_consistent(draws):
    for s in draws[:2000]:
        assert (s.color_rgb is not None) == s.apply_random_color
        assert (s.texture_id is not None) == s.apply_random_texture
        if s.texture_id is not None:
            assert 0 <= s.texture_id < 16
        assert all(abs(j) <= 2.24 for j in s.jitter)


def test_spec_deterministic():
    assert sample_mask_spec(spec_rng(5, 42), 2.0) == sample_mask_spec(spec_rng(5, 42), 2.0)
    assert sample_mask_spec(spec_rng(5, 42), 2.0) != sample_mask_spec(spec_rng(5, 43), 2.0)


def _oracle_coverage(size, jitter=(0.0, 0.0)):
    poly = np.clip(np.asarray(DEFAULT_POLYGON) * size + np.asarray(jitter), 0, size)
    centres = np.arange(size) + 0.5
    xx, yy = np.meshgrid(centres, centres)
    inside = MplPath(np.vstack([poly, poly[:1]]), closed=True).contains_points(
        np.column_stack([xx.ravel(), yy.ravel()]))
    return inside.reshape(size, size)


@pytest.mark.parametrize("size", [32, 64, 112])
def test_rasterize_matches_independent_path_test(size):
    ours = rasterize(MaskGeometry(), size)
    oracle = _oracle_coverage(size)
    assert np.array_equal(ours, oracle)


def test_default_coverage_fraction_112():
    frac = _oracle_coverage(112).mean()
    assert 0.25 <= frac <= 0.45
    assert 0.25 <= rasterize(MaskGeometry(), 112).mean() <= 0.45


def test_geometry_covers_anchors_and_spares_eyes():
    cov = rasterize(MaskGeometry(), 112)
    for x, y in CANONICAL_LANDMARKS[2:] * 112:
        assert cov[int(y), int(x)]
    for x, y in CANONICAL_LANDMARKS[:2] * 112:
        assert not cov[int(y), int(x)]


def test_geometry_must_cover_nose_and_mouth():
    with pytest.raises(MaskGeometryInvalid):
        MaskGeometry(polygon=((0.1, 0.9), (0.3, 0.9), (0.2, 1.0)))


def test_degenerate_after_clamping(random_face):
    g = MaskGeometry()
    spec = MaskSpec(MaskType.N95, False, None, False, None, (0.0, 100.0))
    with pytest.raises(MaskGeometryInvalid):
        apply_mask(random_face(112), spec, g)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), index=st.integers(0, 10**6), size=st.sampled_from([32, 64, 112]))
def test_locality_and_eye_region(seed, index, size):
    rng = np.random.default_rng(seed % 1000)
    face = AlignedFace(rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
    spec = sample_mask_spec(spec_rng(seed, index), 0.02 * size)
    out = apply_mask(face, spec)
    cov = rasterize(MaskGeometry(), size, spec.jitter)
    assert out.pixels.shape == face.pixels.shape
    assert np.array_equal(out.pixels[~cov], face.pixels[~cov])
    top = int(0.35 * size)
    assert np.array_equal(out.pixels[:top], face.pixels[:top])


def test_apply_mask_pure(random_face):
    face = random_face(64, seed=4)
    spec = sample_mask_spec(spec_rng(1, 2), 1.28)
    a, b = apply_mask(face, spec), apply_mask(face, spec)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, face.pixels)


def test_random_color_used_when_flat(random_face):
    face = random_face(32)
    spec = MaskSpec(MaskType.CLOTH, True, (1, 2, 3), False, None, (0.0, 0.0))
    cov = rasterize(MaskGeometry(), 32)
    assert (apply_mask(face, spec).pixels[cov] == (1, 2, 3)).all()


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def fixture_tree(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("fx") / "orig", seed=0)


def test_twin_mirrors_fixture(fixture_tree, tmp_path):
    twin = build_masked_twin(fixture_tree, 7, tmp_path / "m")
    assert (twin.num_identities, twin.num_images) == (20, 1000)
    assert twin.files == fixture_tree.files
    assert twin.masked_twin


def test_twin_byte_deterministic_and_seed_sensitive(fixture_tree, tmp_path):
    a = build_masked_twin(fixture_tree, 7, tmp_path / "a")
    b = build_masked_twin(fixture_tree, 7, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    c = build_masked_twin(fixture_tree, 8, tmp_path / "c")
    pa, pc = a.load_pixels(), c.load_pixels()
    region = rasterize(MaskGeometry(), 32, (0.64, 0.64)) | rasterize(MaskGeometry(), 32, (-0.64, -0.64))
    differs = [(pa[i][region] != pc[i][region]).any() for i in range(len(pa))]
    assert np.mean(differs) >= 0.99


def test_twin_parallel_matches_serial(tmp_path):
    m = make_fixture(tmp_path / "o", seed=1, num_identities=3, images_per_identity=4)
    build_masked_twin(m, 3, tmp_path / "s")
    build_masked_twin(m, 3, tmp_path / "p", workers=2)
    assert _tree_digest(tmp_path / "s") == _tree_digest(tmp_path / "p")


def test_twin_rejects_size_mismatch(tmp_path):
    from mtarcface.errors import DatasetError
    m = make_fixture(tmp_path / "o", seed=1, num_identities=1, images_per_identity=1)
    with pytest.raises(DatasetError):
        build_masked_twin(m, 3, tmp_path / "m", size=112)
