import numpy as np

from nirfuse.data import NoiseSpec
from nirfuse.toy import make_triples


def test_shapes_and_range():
    t = make_triples(3, 16, NoiseSpec(8.0), seed=0)
    assert t.noisy.shape == t.clean.shape == (3, 3, 16, 16)
    assert t.nir.shape == (3, 1, 16, 16)
    for a in (t.noisy, t.clean, t.nir):
        assert a.min() >= 0.0 and a.max() <= 1.0


def test_seeded():
    a = make_triples(2, 16, NoiseSpec(8.0), seed=4, offset_range=0.2, mask_fraction=0.3)
    b = make_triples(2, 16, NoiseSpec(8.0), seed=4, offset_range=0.2, mask_fraction=0.3)
    np.testing.assert_array_equal(a.nir, b.nir)
    np.testing.assert_array_equal(a.noisy, b.noisy)


def test_consistent_nir_is_a_channel_mix():
    t = make_triples(4, 16, NoiseSpec(0.0), seed=1)
    for clean, nir in zip(t.clean, t.nir):
        w, *_ = np.linalg.lstsq(clean.reshape(3, -1).T, nir.ravel(), rcond=None)
        assert np.allclose(clean.reshape(3, -1).T @ w, nir.ravel(), atol=1e-10)
        assert abs(w.sum() - 1) < 1e-8 and (w > 0).all()


def test_mask_replaces_a_square():
    plain = make_triples(1, 20, NoiseSpec(0.0), seed=2)
    masked = make_triples(1, 20, NoiseSpec(0.0), seed=2, mask_fraction=0.5)
    differs = np.any(plain.nir[0, 0] != masked.nir[0, 0], axis=None)
    assert differs
    np.testing.assert_array_equal(plain.clean, masked.clean)
    rows, cols = np.nonzero(plain.nir[0, 0] != masked.nir[0, 0])
    assert rows.max() - rows.min() < 10 and cols.max() - cols.min() < 10


def test_scenes_view():
    t = make_triples(2, 8, NoiseSpec(4.0), seed=3)
    scenes = t.scenes()
    assert [s.scene_id for s in scenes] == ["toy000", "toy001"]
    np.testing.assert_array_equal(scenes[1].nir, t.nir[1])
