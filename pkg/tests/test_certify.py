import math

import numpy as np
import pytest

from lrpe import certify as ce
from lrpe import equilibrium as eq
from lrpe import nn, phantoms as ph, tomo


@pytest.fixture(scope="module")
def dense_tiny():
    g = tomo.GeometryConfig.covering(4, 2, 6)
    A = tomo.build_system_matrix(g)
    ev = np.linalg.eigvalsh(A.toarray().T @ A.toarray())
    return g, A, ev


def test_gamma_unit_pixel_zero_networks():
    g = tomo.GeometryConfig(1, 1, 1, 1, detector_spacing=1.0, fov_radius=math.sqrt(0.5))
    A = tomo.build_system_matrix(g)
    cfg = eq.LRPEConfig(eta=0.1, fidelity="empirical")
    samples = [(np.zeros((5, 1, 1)), np.ones((1, 1)), np.zeros((1, 1)))]
    cert = ce.certify(A, nn.NetworkWeights.zeros(5), cfg, samples)
    assert cert.L == pytest.approx(1.0) and cert.mu == pytest.approx(1.0)
    assert cert.eps1 == 0.0
    assert cert.gamma == pytest.approx(0.8, abs=1e-12)
    assert cert.contractive and cert.theorem == "empirical_fidelity"


def test_gamma_substitution_cases():
    c = ce.ContractivityCertificate.build(2.0, 0.0, 0.5, 0.0, 0.1, "empirical_fidelity")
    assert c.gamma == pytest.approx(0.95, abs=1e-12) and c.contractive
    # eps1 + L eps2 = 1 + mu exactly: boundary is not contractive
    c = ce.ContractivityCertificate.build(2.0, 0.5, 0.5, 0.5, 0.1, "learned_fidelity")
    assert c.gamma == 1.0 and not c.contractive
    with pytest.raises(ValueError):
        ce.ContractivityCertificate.build(1.0, 2.0, 0.0, 0.0, 0.1, "empirical_fidelity")


def test_gamma_monotone_in_epsilons():
    eps = np.linspace(0, 2, 41)
    g1 = [ce.gamma_formula("learned_fidelity", 3.0, 0.1, e, 0.2, 0.1) for e in eps]
    g2 = [ce.gamma_formula("learned_fidelity", 3.0, 0.1, 0.2, e, 0.1) for e in eps]
    g3 = [ce.gamma_formula("empirical_fidelity", 3.0, 0.1, e, 0.0, 0.1) for e in eps]
    for g in (g1, g2, g3):
        assert np.all(np.diff(g) > 0)


def test_step_bound_flag():
    assert ce.ContractivityCertificate.build(3.0, 0.0, 0, 0, 0.2, "empirical_fidelity").step_bound_ok
    assert not ce.ContractivityCertificate.build(3.0, 0.0, 0, 0, 0.3, "empirical_fidelity").step_bound_ok


def test_zero_network_ratio_matches_eigen_oracle(dense_tiny):
    g, A, ev = dense_tiny
    cfg = eq.LRPEConfig(eta=0.1, fidelity="empirical")
    b = np.random.default_rng(0).standard_normal((6, g.num_bins))
    want = np.max(np.abs(1 - 0.1 * (1 + ev)))
    got = ce.measure_contraction(nn.NetworkWeights.zeros(5), cfg, b, np.zeros((4, 4)), 20, 0, A,
                                 power_steps=3000)
    assert got <= want + 1e-9
    assert abs(got - want) < 1e-6
    bounds = tomo.spectral_bounds(A, iters=200_000, tol=1e-12)
    cert = ce.certify(A, nn.NetworkWeights.zeros(5), cfg, [(np.zeros((5, 4, 4)), b, np.zeros((4, 4)))],
                      bounds=bounds)
    assert abs(cert.gamma - want) < 1e-6


def test_vanishing_step_ratio_is_one(dense_tiny):
    g, A, _ = dense_tiny
    cfg = eq.LRPEConfig(eta=1e-8)
    b = np.random.default_rng(1).standard_normal((6, g.num_bins))
    got = ce.measure_contraction(nn.xavier_init(0), cfg, b, np.zeros((4, 4)), 20, 0, A)
    assert abs(got - 1.0) < 1e-6


def test_degenerate_pairs_argument():
    with pytest.raises(ValueError):
        ce.measure_contraction(None, eq.LRPEConfig(), None, None, 0, 0, None)
    with pytest.raises(ValueError):
        ce.certify(None, None, eq.LRPEConfig(), [])


@pytest.fixture(scope="module")
def normalised16():
    g = tomo.GeometryConfig.covering(16, 8, 20)
    A = tomo.build_system_matrix(g)
    bounds = tomo.spectral_bounds(A, iters=3000)
    w = nn.xavier_init(3)
    w = nn.NetworkWeights(nn.spectral_normalize(w.r_net, 0.4, (16, 16)),
                          nn.spectral_normalize(w.s_net, 0.05 / bounds.L, (20, g.num_bins)))
    u = ph.random_phantom(3, 16)
    b = ph.add_noise(tomo.forward_project(A, u), ph.NoiseSpec("gaussian_percent", 0.05, 0))
    prior = tomo.upsample_adjoint(tomo.downsample(u, g), g)
    return g, A, bounds, w, b, prior


def test_certificate_bounds_measurement(normalised16):
    g, A, bounds, w, b, prior = normalised16
    cfg = eq.LRPEConfig(eta=0.1)
    samples = ce.sample_inputs_along_path(b, prior, w, cfg, A, count=6)
    cert = ce.certify(A, w, cfg, samples, bounds=bounds)
    assert cert.contractive and cert.step_bound_ok and cert.verified
    assert cert.eps1 <= 0.4 + 1e-9 and cert.eps2 <= 0.05 / bounds.L + 1e-9
    ratio = ce.measure_contraction(w, cfg, b, prior, 200, 0, A, power_steps=50)
    assert ratio <= cert.gamma + 0.02


def test_contractive_residuals_decay(normalised16):
    g, A, bounds, w, b, prior = normalised16
    cfg = eq.LRPEConfig(eta=0.1, stages=30)
    samples = ce.sample_inputs_along_path(b, prior, w, cfg, A, count=4)
    cert = ce.certify(A, w, cfg, samples, bounds=bounds)
    _, trace = eq.fixed_point_iterate(np.zeros((5, 16, 16)), b, prior, w, cfg, A)
    r = np.array(trace.residuals)
    assert np.all(r[2:] <= (cert.gamma + 0.05) * r[1:-1])


def test_report_files(tmp_path, normalised16):
    g, A, bounds, w, b, prior = normalised16
    cfg = eq.LRPEConfig()
    cert = ce.certify(A, w, cfg, ce.sample_inputs_along_path(b, prior, w, cfg, A, count=3), bounds=bounds)
    cert.write(tmp_path / "c.txt", tmp_path / "c.csv")
    from lrpe.io import read_kv
    kv = read_kv(tmp_path / "c.txt")
    assert float(kv["gamma"]) == pytest.approx(cert.gamma, rel=1e-12)
    assert kv["theorem"] == "learned_fidelity" and kv["label"] == "empirical certificate"
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "sample,eps1,eps2" and len(lines) == 4
