import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtarcface.errors import TwinMismatch
from mtarcface.fixture import make_fixture
from mtarcface.maskgen import build_masked_twin
from mtarcface.sampler import SamplerConfig, batch_plan, epoch_permutation, next_batch


def test_trivial_permutation():
    assert epoch_permutation(3, 0, 1).tolist() == [0]


def test_permutation_deterministic():
    assert np.array_equal(epoch_permutation(7, 0, 10), epoch_permutation(7, 0, 10))
    assert sorted(epoch_permutation(7, 0, 10)) == list(range(10))
    assert not np.array_equal(epoch_permutation(7, 0, 1000), epoch_permutation(7, 1, 1000))


def test_permutation_unbiased():
    n = 10_000
    positions = [int(np.argmax(epoch_permutation(1, e, n) == 0)) for e in range(200)]
    assert 4400 <= np.mean(positions) <= 5600


@pytest.mark.parametrize("p, expected", [(0.0, 0), (1.0, 1)])
def test_extreme_probabilities(p, expected):
    cfg = SamplerConfig(seed=0, batch_size=50, epoch_length=333, masked_probability=p)
    for step in range(20):
        assert (batch_plan(cfg, step)[1] == expected).all()


def test_half_probability_fraction():
    cfg = SamplerConfig(seed=4, batch_size=100, epoch_length=1000, masked_probability=0.5)
    flags = np.concatenate([batch_plan(cfg, s)[1] for s in range(100)])
    assert len(flags) == 10_000
    assert 0.48 <= flags.mean() <= 0.52


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 300), b=st.integers(1, 64), seed=st.integers(0, 1000))
def test_epoch_coverage(n, b, seed):
    cfg = SamplerConfig(seed=seed, batch_size=b, epoch_length=n)
    steps = -(-2 * n // b)
    stream = np.concatenate([batch_plan(cfg, s)[0] for s in range(steps)])
    for epoch in range(2):
        chunk = stream[epoch * n:(epoch + 1) * n]
        assert sorted(chunk.tolist()) == list(range(n))
        assert np.array_equal(chunk, epoch_permutation(seed, epoch, n))


def test_plan_is_stateless():
    cfg = SamplerConfig(seed=9, batch_size=7, epoch_length=20)
    forward = [batch_plan(cfg, s) for s in range(10)]
    backward = [batch_plan(cfg, s) for s in reversed(range(10))][::-1]
    for (i1, f1), (i2, f2) in zip(forward, backward):
        assert np.array_equal(i1, i2) and np.array_equal(f1, f2)


def test_invalid_config():
    with pytest.raises(ValueError):
        SamplerConfig(0, 4, 10, masked_probability=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(0, 0, 10)


@pytest.fixture(scope="module")
def twins(tmp_path_factory):
    root = tmp_path_factory.mktemp("tw")
    orig = make_fixture(root / "o", seed=2, num_identities=3, images_per_identity=4)
    return orig, build_masked_twin(orig, 5, root / "m")


def test_next_batch_records(twins):
    orig, masked = twins
    cfg = SamplerConfig(seed=1, batch_size=5, epoch_length=orig.num_images)
    for step in range(4):
        idx, flags = batch_plan(cfg, step)
        records = next_batch(cfg, step, orig, masked)
        assert len(records) == 5
        for r, i, f in zip(records, idx, flags):
            assert r.mask_flag == f
            assert r.identity_label == orig.labels[i]
            source = masked if f else orig
            assert r.face == source.load_face(int(i))


def test_label_invariance_under_flip(twins):
    orig, masked = twins
    for p in (0.0, 1.0):
        cfg = SamplerConfig(seed=1, batch_size=6, epoch_length=orig.num_images, masked_probability=p)
        recs = next_batch(cfg, 3, orig, masked)
        if p == 0.0:
            labels0 = [r.identity_label for r in recs]
            faces0 = [r.face for r in recs]
        else:
            assert [r.identity_label for r in recs] == labels0
            assert all(a != b for a, b in zip(faces0, (r.face for r in recs)))


def test_mismatched_twins(twins, tmp_path):
    orig, _ = twins
    other = make_fixture(tmp_path / "x", seed=2, num_identities=2, images_per_identity=4)
    cfg = SamplerConfig(seed=1, batch_size=2, epoch_length=orig.num_images)
    with pytest.raises(TwinMismatch):
        next_batch(cfg, 0, orig, other)
