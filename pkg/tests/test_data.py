import numpy as np
import pytest

from nirfuse.data import (
    NoiseSpec,
    SceneImages,
    SceneRecord,
    get_preset,
    load_image,
    load_manifest,
    load_scene,
    noise_moments,
    sample_patches,
    save_image,
    split_manifest,
    synth_noise,
    write_manifest,
)
from nirfuse.errors import ConfigError, DataError, ShapeError

from oracles import clipped_noise_moments


class TestImageIO:
    def test_8bit_round_trip(self, tmp_path):
        x = np.random.default_rng(0).uniform(0, 1, (1, 3, 9, 7))
        save_image(x, tmp_path / "a.png")
        y = load_image(tmp_path / "a.png").data
        assert y.shape == x.shape
        assert np.abs(y - x).max() <= 0.5 / 255 + 1e-12

    def test_16bit_round_trip(self, tmp_path):
        x = np.random.default_rng(1).uniform(0, 1, (1, 3, 5, 6))
        save_image(x, tmp_path / "a.png", bits=16)
        y = load_image(tmp_path / "a.png").data
        assert np.abs(y - x).max() <= 1 / 65535

    def test_channel_order_kept(self, tmp_path):
        x = np.zeros((1, 3, 2, 2))
        x[0, 0] = 1.0  # pure red
        save_image(x, tmp_path / "red.png")
        np.testing.assert_array_equal(load_image(tmp_path / "red.png").data, x)

    def test_grayscale_is_one_channel(self, tmp_path):
        save_image(np.full((1, 1, 4, 4), 0.5), tmp_path / "g.png")
        assert load_image(tmp_path / "g.png").shape == (1, 1, 4, 4)

    def test_save_clamps(self, tmp_path):
        save_image(np.array([[[[-1.0, 2.0]]]]), tmp_path / "c.png")
        np.testing.assert_array_equal(load_image(tmp_path / "c.png").data.ravel(), [0.0, 1.0])

    def test_unreadable_file_names_path(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(DataError, match="bad.png"):
            load_image(bad)


class TestNoise:
    def test_noiseless_identity(self):
        x = np.random.default_rng(2).uniform(0, 1, (1, 3, 8, 8))
        np.testing.assert_array_equal(synth_noise(x, NoiseSpec(0.0)).data, x)

    def test_reproducible(self):
        x = np.full((1, 3, 16, 16), 0.4)
        a = synth_noise(x, NoiseSpec(8.0, seed=3)).data
        b = synth_noise(x, NoiseSpec(8.0, seed=3)).data
        c = synth_noise(x, NoiseSpec(8.0, seed=4)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_output_in_range(self):
        x = np.random.default_rng(5).uniform(0, 1, (1, 3, 32, 32))
        y = synth_noise(x, NoiseSpec(25.0, seed=1)).data
        assert y.min() >= 0.0 and y.max() <= 1.0

    @pytest.mark.parametrize("kw", [dict(sigma=-1.0), dict(sigma=4.0, brightness_scale=0.0),
                                    dict(sigma=4.0, brightness_scale=1.5)])
    def test_invalid_spec_rejected(self, kw):
        with pytest.raises(ConfigError):
            NoiseSpec(**kw)

    @pytest.mark.parametrize("level,sigma,bright", [(0.5, 8, 1.0), (0.02, 8, 1.0),
                                                    (0.9, 4, 1.0), (0.5, 8, 0.3)])
    def test_moments_match_quadrature(self, level, sigma, bright):
        mean, var = noise_moments(level, NoiseSpec(sigma, bright))
        m_ref, v_ref = clipped_noise_moments(level, sigma, bright)
        assert mean == pytest.approx(m_ref, rel=1e-6, abs=1e-9)
        assert var == pytest.approx(v_ref, rel=1e-5)

    def test_unclipped_moments(self):
        mean, var = noise_moments(0.5, NoiseSpec(8.0), clip=False)
        g = 8 / 255
        assert mean == 0.5 and var == pytest.approx(g * 0.5 + g * g, rel=1e-15)

    def test_brightness_scaling_of_mean(self):
        x = np.full((1, 3, 256, 256), 0.6)
        y = synth_noise(x, NoiseSpec(4.0, brightness_scale=0.5, seed=9)).data
        _, var = noise_moments(0.6, NoiseSpec(4.0, 0.5))
        se = np.sqrt(var / y.size)
        assert abs(y.mean() - 0.3) < 3 * se

    def test_presets(self):
        assert get_preset("dvd-sigma4").noise.sigma == 4.0
        assert get_preset("dvd-sigma8").noise.sigma == 8.0
        assert get_preset("real-high").level == "high"
        with pytest.raises(ConfigError):
            get_preset("dvd-sigma16")


def _write_scene(root, sid, h=12, w=12, seed=0, nir=True, levels=("low",)):
    rng = np.random.default_rng(seed)
    save_image(rng.uniform(0, 1, (1, 3, h, w)), root / f"{sid}_rgb.png")
    if nir:
        save_image(rng.uniform(0, 1, (1, 1, h, w)), root / f"{sid}_nir.png")
    noisy = {}
    for lv in levels:
        save_image(rng.uniform(0, 1, (1, 3, h, w)), root / f"{sid}_{lv}.png")
        noisy[lv] = root / f"{sid}_{lv}.png"
    return SceneRecord(sid, root / f"{sid}_rgb.png", root / f"{sid}_nir.png" if nir else None, noisy)


class TestManifest:
    def test_round_trip(self, tmp_path):
        recs = [_write_scene(tmp_path, f"s{i}", seed=i, nir=i != 1) for i in range(3)]
        write_manifest(recs, tmp_path / "m.tsv")
        back = load_manifest(tmp_path / "m.tsv")
        assert [r.scene_id for r in back] == ["s0", "s1", "s2"]
        assert back[1].nir is None
        for a, b in zip(recs, back):
            assert a.clean.resolve() == b.clean.resolve()
            assert {t: p.resolve() for t, p in a.noisy.items()} == \
                   {t: p.resolve() for t, p in b.noisy.items()}

    def test_duplicate_id_rejected(self, tmp_path):
        rec = _write_scene(tmp_path, "s0")
        write_manifest([rec, rec], tmp_path / "m.tsv")
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(tmp_path / "m.tsv")

    def test_missing_file_rejected(self, tmp_path):
        rec = _write_scene(tmp_path, "s0")
        write_manifest([rec], tmp_path / "m.tsv")
        (tmp_path / "s0_nir.png").unlink()
        with pytest.raises(DataError, match="missing"):
            load_manifest(tmp_path / "m.tsv")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "nope.tsv")

    def test_split_70_30(self):
        recs = [SceneRecord(f"s{i:03d}", None, None) for i in range(100)]
        train, test = split_manifest(recs, 0.7, seed=0)
        assert (len(train), len(test)) == (70, 30)
        ids_tr, ids_te = {r.scene_id for r in train}, {r.scene_id for r in test}
        assert not ids_tr & ids_te
        assert ids_tr | ids_te == {r.scene_id for r in recs}

    def test_split_is_seeded(self):
        recs = [SceneRecord(f"s{i}", None, None) for i in range(20)]
        a = [r.scene_id for r in split_manifest(recs, 0.7, seed=3)[0]]
        b = [r.scene_id for r in split_manifest(recs, 0.7, seed=3)[0]]
        c = [r.scene_id for r in split_manifest(recs, 0.7, seed=4)[0]]
        assert a == b and a != c

    def test_load_scene_level(self, tmp_path):
        rec = _write_scene(tmp_path, "s0", levels=("low", "high"))
        scene = load_scene(rec, "high")
        assert scene.noisy.shape == (3, 12, 12) and scene.nir.shape == (1, 12, 12)
        with pytest.raises(DataError):
            load_scene(rec, "middle")

    def test_nir_size_mismatch_rejected(self, tmp_path):
        rec = _write_scene(tmp_path, "s0")
        save_image(np.zeros((1, 1, 10, 12)), rec.nir)
        with pytest.raises(DataError):
            load_scene(rec)


def ramp_scene(h=20, w=24):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    code = yy * w + xx
    clean = np.stack([code, code + 0.25, code + 0.5])
    return SceneImages("ramp", clean, code[None].copy(), clean + 1000.0)


class TestPatches:
    @pytest.mark.parametrize("augment", [False, True])
    def test_crops_are_aligned(self, augment):
        b = sample_patches(ramp_scene(), 16, 8, seed=0, augment=augment)
        np.testing.assert_array_equal(b.nir.data[:, 0], b.clean_rgb.data[:, 0])
        np.testing.assert_array_equal(b.noisy_rgb.data - b.clean_rgb.data, 1000.0)

    def test_crop_is_a_window(self):
        b = sample_patches(ramp_scene(), 4, 8, seed=1)
        for p in b.nir.data[:, 0]:
            assert np.all(np.diff(p, axis=1) == 1) and np.all(np.diff(p, axis=0) == 24)

    def test_seeded(self):
        a = sample_patches(ramp_scene(), 4, 8, seed=5, augment=True)
        b = sample_patches(ramp_scene(), 4, 8, seed=5, augment=True)
        np.testing.assert_array_equal(a.nir.data, b.nir.data)

    def test_augmentation_commutes_with_residual(self):
        rng = np.random.default_rng(6)
        clean = rng.uniform(0, 1, (3, 16, 16))
        noisy = clean + rng.normal(0, 0.1, clean.shape)
        scene = SceneImages("x", clean, clean[:1], noisy)
        plain = sample_patches(scene, 32, 16, seed=7)
        aug = sample_patches(scene, 32, 16, seed=7, augment=True)
        r0 = plain.noisy_rgb.data - plain.clean_rgb.data
        r1 = aug.noisy_rgb.data - aug.clean_rgb.data
        assert np.sort(r0[0].ravel()) == pytest.approx(np.sort(r1[0].ravel()))

    def test_synthesized_noise_after_crop(self):
        scene = SceneImages("x", np.full((3, 16, 16), 0.5), None)
        b = sample_patches(scene, 2, 8, seed=0, noise=NoiseSpec(8.0))
        assert b.nir is None and b.noisy_rgb.data.std() > 0

    def test_small_image_rejected(self):
        with pytest.raises(ShapeError):
            sample_patches(ramp_scene(6, 6), 1, 8, seed=0)

    def test_missing_noise_rejected(self):
        with pytest.raises(DataError):
            sample_patches(SceneImages("x", np.zeros((3, 8, 8)), None), 1, 8, seed=0)
