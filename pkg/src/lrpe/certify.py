"""Contraction certificates for the LRPE iteration map.

With ``L`` and ``mu`` the extreme eigenvalues of ``A^T A`` and ``eps1``,
``eps2`` Lipschitz constants of the residual branches of ``R`` and ``S``,
the map is ``gamma``-Lipschitz with

    gamma = 1 - eta (1 + mu) + eta eps1                (empirical fidelity)
    gamma = 1 - eta (1 + mu) + eta (L eps2 + eps1)     (learned fidelity)

provided ``eta < 1 / (L + 1)``.  The epsilons here are local Jacobian norms
maximised over sample inputs, so the result is an empirical certificate.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .equilibrium import LRPEConfig, fixed_point_iterate, lrpe_step
from .io import write_kv
from .tomo import SpectralBounds, SystemMatrix, forward_project, spectral_bounds

THEOREMS = {"empirical": "empirical_fidelity", "learned": "learned_fidelity"}


def gamma_formula(theorem: str, L: float, mu: float, eps1: float, eps2: float,
                  eta: float) -> float:
    base = 1.0 - eta * (1.0 + mu)
    if theorem == "empirical_fidelity":
        return base + eta * eps1
    if theorem == "learned_fidelity":
        return base + eta * (L * eps2 + eps1)
    raise ValueError(f"unknown theorem {theorem!r}")


@dataclass(frozen=True)
class ContractivityCertificate:
    L: float
    mu: float
    eps1: float
    eps2: float
    eta: float
    gamma: float
    theorem: str
    step_bound_ok: bool
    contractive: bool
    sample_count: int
    verified: bool = True
    label: str = "empirical certificate"
    eps1_samples: tuple = field(default=(), repr=False)
    eps2_samples: tuple = field(default=(), repr=False)

    @classmethod
    def build(cls, L, mu, eps1, eps2, eta, theorem, sample_count=0, verified=True,
              eps1_samples=(), eps2_samples=()):
        if not L >= mu >= 0:
            raise ValueError(f"need L >= mu >= 0, got L={L}, mu={mu}")
        gamma = gamma_formula(theorem, L, mu, eps1, eps2, eta)
        return cls(L=float(L), mu=float(mu), eps1=float(eps1), eps2=float(eps2),
                   eta=float(eta), gamma=gamma, theorem=theorem,
                   step_bound_ok=bool(eta < 1.0 / (L + 1.0)), contractive=bool(gamma < 1.0),
                   sample_count=int(sample_count), verified=bool(verified),
                   eps1_samples=tuple(eps1_samples), eps2_samples=tuple(eps2_samples))

    def report(self) -> dict:
        d = asdict(self)
        d.pop("eps1_samples")
        d.pop("eps2_samples")
        return d

    def write(self, path, csv_path=None) -> None:
        """Key-value report at ``path`` and per-sample epsilons as CSV."""
        write_kv(path, self.report())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["sample", "eps1", "eps2"])
                for i, e1 in enumerate(self.eps1_samples):
                    e2 = self.eps2_samples[i] if i < len(self.eps2_samples) else ""
                    wr.writerow([i, repr(float(e1)), "" if e2 == "" else repr(float(e2))])


def sample_inputs_along_path(b, prior, w: nn.NetworkWeights, cfg: LRPEConfig,
                             A: SystemMatrix, count: int = 8, seed: int = 0,
                             spread: float = 0.05):
    """States visited by an inference run plus jittered copies of them.

    Returns ``(state, b, prior)`` triples suitable for :func:`certify`.
    """
    rng = np.random.default_rng(seed)
    state = np.zeros((cfg.n_p, A.side, A.side))
    out = []
    for k in range(count):
        state = lrpe_step(state, b, prior, w, cfg, A)
        scale = spread * (np.sqrt(np.mean(state**2)) + 1e-3)
        out.append((state + scale * rng.standard_normal(state.shape) if k % 2 else state, b, prior))
    return out


def certify(A: SystemMatrix, w: nn.NetworkWeights, cfg: LRPEConfig, sample_inputs,
            seed: int = 0, bounds: SpectralBounds | None = None, jac_iters: int = 50,
            spectral_iters: int = 2000) -> ContractivityCertificate:
    """Assemble a certificate from spectral bounds and sampled Jacobian norms.

    ``sample_inputs`` holds ``(state, b, prior)`` triples.  If the lower
    eigenvalue did not converge ``mu`` is replaced by the safe value 0; if the
    upper one did not converge the certificate is marked unverified.
    """
    if not sample_inputs:
        raise ValueError("sample_inputs is empty")
    sb = bounds if bounds is not None else spectral_bounds(A, iters=spectral_iters, seed=seed)
    L = sb.L
    verified = sb.L_residual <= 1e-6 * max(L, 1.0)
    mu = sb.mu if sb.converged else 0.0
    eps1s, eps2s = [], []
    for i, (state, b, prior) in enumerate(sample_inputs):
        if not cfg.use_prior:
            prior = np.zeros_like(prior)
        x_r = np.concatenate([state, prior[None]])
        eps1s.append(nn.jacobian_spectral_norm(w.r_net, x_r, jac_iters, seed + i, cfg.n_p))
        if cfg.fidelity == "learned":
            x_s = np.concatenate([forward_project(A, state), b[None]])
            eps2s.append(nn.jacobian_spectral_norm(w.s_net, x_s, jac_iters, seed + i, cfg.n_p))
    eps1 = max(eps1s)
    eps2 = max(eps2s) if eps2s else 0.0
    return ContractivityCertificate.build(L, mu, eps1, eps2, cfg.eta, THEOREMS[cfg.fidelity],
                                          len(sample_inputs), verified, eps1s, eps2s)


def measure_contraction(w: nn.NetworkWeights, cfg: LRPEConfig, b, prior, pairs: int,
                        seed: int, A: SystemMatrix, centre=None, power_steps: int = 100,
                        scales=(1e-3, 1e-2, 1e-1, 1.0)) -> float:
    """Largest observed ``||f(u) - f(u')|| / ||u - u'||`` for the stage map ``f``.

    Pairs are drawn around ``centre`` (default: the state after a few
    inference stages) at several relative scales.  The best pair is then
    refined by pushing its difference through ``f`` repeatedly, which on a
    linear map is power iteration and finds the extreme ratio.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    rng = np.random.default_rng(seed)

    def f(u):
        return lrpe_step(u, b, prior, w, cfg, A)

    if centre is None:
        centre, _ = fixed_point_iterate(np.zeros((cfg.n_p, A.side, A.side)), b, prior, w,
                                        replace(cfg, tolerance=0.0), A,
                                        stages=min(cfg.stages, 3))
    ref = float(np.sqrt(np.mean(centre**2))) or 1.0
    best, best_pair = 0.0, None
    for i in range(pairs):
        scale = ref * scales[i % len(scales)]
        u = centre + scale * rng.standard_normal(centre.shape)
        d = rng.standard_normal(centre.shape)
        dn = np.linalg.norm(d)
        if dn == 0:
            continue
        d *= scale / dn
        fu = f(u)
        ratio = np.linalg.norm(f(u + d) - fu) / np.linalg.norm(d)
        if ratio > best:
            best, best_pair = ratio, (u, d, fu)
    if best_pair is not None:
        u, d, fu = best_pair
        size = np.linalg.norm(d)
        for _ in range(power_steps):
            diff = f(u + d) - fu
            nd = np.linalg.norm(diff)
            if nd == 0:
                break
            best = max(best, nd / np.linalg.norm(d))
            d = diff * (size / nd)
    return float(best)
