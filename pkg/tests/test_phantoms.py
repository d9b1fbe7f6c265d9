import numpy as np
import pytest

from lrpe import phantoms as ph


def test_empty_and_full():
    assert not ph.rasterize_phantom(ph.EllipsePhantomSpec(), 8).any()
    full = ph.EllipsePhantomSpec((ph.Ellipse(0, 0, 2.0, 2.0, 0, 1.0),))
    np.testing.assert_array_equal(ph.rasterize_phantom(full, 8), np.ones((8, 8)))


def test_shepp_logan_point_membership():
    img = ph.rasterize_phantom(ph.SHEPP_LOGAN, 64)
    # centre of pixel (32, 32) in normalised coordinates
    x = -1 + (32 + 0.5) * 2 / 64
    y = 1 - (32 + 0.5) * 2 / 64
    want = 0.0
    for e in ph.SHEPP_LOGAN.ellipses:
        t = np.deg2rad(e.angle)
        xr = (x - e.cx) * np.cos(t) + (y - e.cy) * np.sin(t)
        yr = -(x - e.cx) * np.sin(t) + (y - e.cy) * np.cos(t)
        if (xr / e.a) ** 2 + (yr / e.b) ** 2 <= 1:
            want += e.intensity
    assert img[32, 32] == pytest.approx(min(max(want, 0.0), 1.0))
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_clamping():
    spec = ph.EllipsePhantomSpec((ph.Ellipse(0, 0, 0.5, 0.5, 0, 0.8), ph.Ellipse(0, 0, 0.3, 0.3, 0, 0.8),
                                  ph.Ellipse(0.6, 0.6, 0.2, 0.2, 0, -0.5)))
    img = ph.rasterize_phantom(spec, 32)
    assert img.max() == 1.0 and img.min() == 0.0


def test_bad_ellipse():
    with pytest.raises(ValueError):
        ph.Ellipse(0, 0, 0.0, 1.0)


def test_random_phantom_determinism():
    a = ph.random_phantom(1, 32)
    np.testing.assert_array_equal(a, ph.random_phantom(1, 32))
    assert (a != ph.random_phantom(2, 32)).any()
    with pytest.raises(ValueError):
        ph.random_phantom(1, 32, k_ellipses=0)


def test_random_phantom_mean_range():
    means = [ph.random_phantom(s, 16).mean() for s in range(1000)]
    assert 0.05 < np.mean(means) < 0.95
    assert all(0.0 <= ph.random_phantom(s, 16).min() for s in range(20))


def test_spec_file_roundtrip(tmp_path):
    p = tmp_path / "sl.txt"
    ph.write_phantom_spec(p, ph.SHEPP_LOGAN)
    assert ph.read_phantom_spec(p) == ph.SHEPP_LOGAN


# --- noise -------------------------------------------------------------------

@pytest.fixture
def sino():
    rng = np.random.default_rng(0)
    return rng.uniform(0.5, 3.0, (50, 20))


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        ph.NoiseSpec("gaussian_percent", 0.0)
    with pytest.raises(ValueError):
        ph.NoiseSpec("salt_pepper", 1.0)
    with pytest.raises(ValueError):
        ph.NoiseSpec("speckle", 0.1)


def test_vanishing_gaussian(sino):
    out = ph.add_noise(sino, ph.NoiseSpec("gaussian_percent", 1e-12, 3))
    assert np.max(np.abs(out - sino)) < 1e-6


def test_gaussian_std():
    s = np.random.default_rng(1).uniform(0, 2, (400, 300))
    out = ph.add_noise(s, ph.NoiseSpec("gaussian_percent", 0.05, 7))
    sigma = 0.05 * np.mean(np.abs(s))
    assert abs(np.std(out - s) - sigma) < 0.05 * sigma


def test_poisson_high_dose(sino):
    rel = []
    for seed in range(100):
        out = ph.add_noise(sino, ph.NoiseSpec("poisson_photons", 1e9, seed))
        rel.append(np.max(np.abs(out - sino) / sino))
    assert max(rel) < 1e-3


def test_poisson_zero_counts_are_finite():
    s = np.full((4, 4), 50.0)  # I0 * exp(-50) is essentially zero photons
    out = ph.add_noise(s, ph.NoiseSpec("poisson_photons", 100.0, 0))
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, -np.log(1 / 100.0))


def test_salt_pepper_exact_count():
    s = np.random.default_rng(2).uniform(0.1, 0.9, (40, 25))
    out = ph.add_noise(s, ph.NoiseSpec("salt_pepper", 0.1, 5))
    changed = out != s
    assert np.sum(changed) == 100
    assert np.sum(out == 0.0) == 50
    assert np.sum(changed & (out == s.max())) == 50


def test_noise_determinism(sino):
    for kind, lvl in [("gaussian_percent", 0.05), ("poisson_photons", 1e3), ("salt_pepper", 0.05)]:
        spec = ph.NoiseSpec(kind, lvl, 11)
        np.testing.assert_array_equal(ph.add_noise(sino, spec), ph.add_noise(sino, spec))
