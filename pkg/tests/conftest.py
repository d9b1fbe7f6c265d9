import math

import numpy as np
import pytest

from lrpe import tomo


def dense_sampling_matrix(geom: tomo.GeometryConfig, grid="fine", samples=10_000):
    """Ray/pixel lengths by midpoint sampling of each ray's chord through the FOV circle."""
    side = geom.side(grid)
    width = geom.image_width
    pitch = width / side
    half = width / 2
    R = geom.fov_radius
    p0s, p1s = tomo.ray_endpoints(geom)
    out = np.zeros((len(p0s), side * side))
    for i, (p0, p1) in enumerate(zip(p0s, p1s)):
        d = (p1 - p0) / np.linalg.norm(p1 - p0)
        # closest approach of the ray line to the origin
        s_mid = -p0 @ d
        dist2 = p0 @ p0 - s_mid**2
        if dist2 >= R * R:
            continue
        h = math.sqrt(R * R - dist2)
        ds = 2 * h / samples
        s = s_mid - h + ds * (np.arange(samples) + 0.5)
        pts = p0[None, :] + s[:, None] * d[None, :]
        inside = (np.abs(pts[:, 0]) < half) & (np.abs(pts[:, 1]) < half)
        col = np.floor((pts[inside, 0] + half) / pitch).astype(int)
        row = np.floor((half - pts[inside, 1]) / pitch).astype(int)
        np.add.at(out[i], row * side + col, ds)
    return out


@pytest.fixture(scope="session")
def geom32():
    return tomo.GeometryConfig.covering(32, 16, 30)


@pytest.fixture(scope="session")
def A32(geom32):
    return tomo.build_system_matrix(geom32)


@pytest.fixture(scope="session")
def fan32():
    g = tomo.GeometryConfig(32, 16, 30, 60, 0.0, 360.0, beam="fan", source_radius=4.0,
                            detector_spacing=0.06, fov_radius=math.sqrt(2))
    return g, tomo.build_system_matrix(g)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record and print one PASS/FAIL line, then assert the outcome."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
