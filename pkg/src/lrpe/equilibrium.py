"""Weight-shared unrolled gradient descent with a low-resolution prior.

One stage maps an ``(n_p, N, N)`` state ``u`` to

    u - eta * (A^T s + t),
    s = (A u - b) + N_S([A u, b])      (learned fidelity)
    s = A u - b                        (empirical fidelity)
    t = u + N_R([u, D^T u_l])

where ``N_S`` and ``N_R`` are the residual branches of the two conv blocks and
``b`` and ``D^T u_l`` are broadcast to every state channel.  The same weights
are used at every stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .classical import PriorReconstructor, TVParams, TVPrior
from .tomo import (GeometryConfig, SystemMatrix, back_project, build_system_matrix,
                   forward_project, upsample_adjoint)

log = logging.getLogger(__name__)

FIDELITIES = ("learned", "empirical")


class DivergenceError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class TrainingError(RuntimeError):
    def __init__(self, msg, weights=None):
        super().__init__(msg)
        self.weights = weights


@dataclass(frozen=True)
class LRPEConfig:
    stages: int = 10
    eta: float = 0.1
    n_p: int = 5
    fidelity: str = "learned"
    use_prior: bool = True
    tolerance: float = 0.0

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.n_p < 1:
            raise ValueError("n_p must be >= 1")
        if self.fidelity not in FIDELITIES:
            raise ValueError(f"fidelity must be one of {FIDELITIES}")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr_init: float = 1e-4
    adam_beta: float = 0.99
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr_init >= 0:
            raise ValueError("lr_init must be >= 0")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class IterationTrace:
    residuals: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)


class ScanOperators:
    """Fine and coarse system matrices plus the prior reconstructor for one geometry."""

    def __init__(self, geom: GeometryConfig, A: SystemMatrix | None = None,
                 A_coarse: SystemMatrix | None = None,
                 prior: PriorReconstructor | None = None,
                 prior_params: TVParams = TVParams(lam=0.02, iters=200)):
        self.geom = geom
        self.A = A if A is not None else build_system_matrix(geom, "fine")
        self._A_coarse = A_coarse
        self._prior = prior
        self.prior_params = prior_params

    @property
    def A_coarse(self) -> SystemMatrix:
        if self._A_coarse is None:
            self._A_coarse = build_system_matrix(self.geom, "coarse")
        return self._A_coarse

    @property
    def prior(self) -> PriorReconstructor:
        if self._prior is None:
            self._prior = TVPrior(self.A_coarse, self.prior_params)
        return self._prior

    def prior_image(self, b) -> np.ndarray:
        """``D^T u_l`` for the coarse reconstruction ``u_l`` of ``b``."""
        return upsample_adjoint(self.prior(b), self.geom)


def _psnr(x, ref):
    mse = float(np.mean((x - ref) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def lrpe_step(state, b, prior, w: nn.NetworkWeights, cfg: LRPEConfig, A: SystemMatrix,
              keep_cache: bool = False):
    """One stage of the iteration map; returns the new state (and cache)."""
    if state.shape != (cfg.n_p, A.side, A.side) or prior.shape != (A.side, A.side):
        raise ValueError("state/prior shape does not match the operator")
    if b.shape != (A.num_views, A.num_bins):
        raise ValueError("sinogram shape does not match the operator")
    if w.n_p != cfg.n_p:
        raise ValueError("weights and config disagree on n_p")
    if not cfg.use_prior:
        prior = np.zeros_like(prior)
    a = forward_project(A, state)
    s = a - b
    cs = None
    if cfg.fidelity == "learned":
        ns, cs = nn.residual_forward(w.s_net, np.concatenate([a, b[None]]))
        s = s + ns
    nr, cr = nn.residual_forward(w.r_net, np.concatenate([state, prior[None]]))
    t = state + nr
    new = state - cfg.eta * (back_project(A, s) + t)
    if keep_cache:
        return new, (cs, cr)
    return new


def _step_backward(G, cache, w: nn.NetworkWeights, cfg: LRPEConfig, A: SystemMatrix):
    """Pull ``dL/du^{k+1}`` back to ``dL/du^k``; returns ``(g_state, g_r, g_s)``."""
    cs, cr = cache
    gs = -cfg.eta * forward_project(A, G)
    gt = -cfg.eta * G
    g_r, gx = nn.residual_backward(w.r_net, cr, gt)
    g_state = G + gt + gx[:cfg.n_p]
    g_s = None
    ga = gs
    if cs is not None:
        g_s, gxs = nn.residual_backward(w.s_net, cs, gs)
        ga = gs + gxs[:cfg.n_p]
    g_state = g_state + back_project(A, ga)
    return g_state, g_r, g_s


def fixed_point_iterate(state0, b, prior, w, cfg: LRPEConfig, A: SystemMatrix,
                        stages: int | None = None, truth=None):
    """Run the iteration map from ``state0``; returns ``(state, trace)``.

    With a positive ``cfg.tolerance`` the loop stops once the step residual
    drops below it, and the state reached by the smallest step is returned.
    """
    stages = cfg.stages if stages is None else stages
    trace = IterationTrace()
    state = np.array(state0, dtype=np.float64)
    best, best_r = None, math.inf
    for k in range(stages):
        new = lrpe_step(state, b, prior, w, cfg, A)
        if not np.isfinite(new).all():
            raise DivergenceError(f"non-finite state at stage {k + 1}", trace)
        r = float(np.linalg.norm(new - state))
        trace.residuals.append(r)
        if truth is not None:
            trace.psnr.append(_psnr(new[0], truth))
        state = new
        r0 = trace.residuals[0]
        if r0 > 0 and r > 1e6 * r0:
            raise DivergenceError(f"residual blew up at stage {k + 1}", trace)
        if cfg.tolerance > 0:
            if r < best_r:
                best, best_r = state, r
            if r < cfg.tolerance:
                break
    if best is not None:
        return best, trace
    return state, trace


def lrpe_infer(b, w: nn.NetworkWeights, ops: ScanOperators, cfg: LRPEConfig,
               truth=None, prior=None, stages: int | None = None):
    """Reconstruct from ``b`` starting at zero; returns ``(image, trace)``.

    ``prior`` may be passed precomputed (``D^T u_l``); otherwise it is built
    with ``ops.prior``.
    """
    b = np.asarray(b, dtype=np.float64)
    if prior is None:
        prior = ops.prior_image(b) if cfg.use_prior else np.zeros((ops.A.side,) * 2)
    state0 = np.zeros((cfg.n_p, ops.A.side, ops.A.side))
    state, trace = fixed_point_iterate(state0, b, prior, w, cfg, ops.A, stages, truth)
    return state[0], trace


def unrolled_loss_grad(truth, b, prior, w: nn.NetworkWeights, cfg: LRPEConfig,
                       A: SystemMatrix):
    """MSE of the K-stage output against ``truth`` and its exact weight gradient."""
    state = np.zeros((cfg.n_p, A.side, A.side))
    caches = []
    for _ in range(cfg.stages):
        state, cache = lrpe_step(state, b, prior, w, cfg, A, keep_cache=True)
        caches.append(cache)
    diff = state[0] - truth
    loss = float(np.mean(diff * diff))
    G = np.zeros_like(state)
    G[0] = 2.0 * diff / diff.size
    grads = [np.zeros_like(a) for a in w.arrays()]
    nr = len(w.r_net.arrays())
    for cache in reversed(caches):
        G, g_r, g_s = _step_backward(G, cache, w, cfg, A)
        for acc, g in zip(grads[:nr], g_r.arrays()):
            acc += g
        if g_s is not None:
            for acc, g in zip(grads[nr:], g_s.arrays()):
                acc += g
    return loss, grads


class Adam:
    def __init__(self, params, beta1=0.99, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(lr_init: float, step: int, total: int) -> float:
    if total <= 1:
        return lr_init
    return 0.5 * lr_init * (1 + math.cos(math.pi * step / total))


def clip_global_norm(grads, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def prepare_dataset(dataset, ops: ScanOperators, cfg: LRPEConfig):
    """Attach ``D^T u_l`` to every ``(truth, sinogram)`` pair."""
    out = []
    for truth, b in dataset:
        b = np.asarray(b, dtype=np.float64)
        prior = ops.prior_image(b) if cfg.use_prior else np.zeros_like(truth)
        out.append((np.asarray(truth, dtype=np.float64), b, prior))
    return out


def lrpe_train(dataset, w0: nn.NetworkWeights, cfg: LRPEConfig, tcfg: TrainConfig,
               ops: ScanOperators, callback=None):
    """Train through all ``cfg.stages`` shared stages with Adam + cosine annealing.

    ``dataset`` holds ``(truth, sinogram)`` or ``(truth, sinogram, prior)``
    tuples.  Returns ``(weights, per-epoch mean losses)``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if all(len(item) == 3 for item in dataset):
        data = [tuple(np.asarray(a, dtype=np.float64) for a in item) for item in dataset]
    else:
        data = prepare_dataset(dataset, ops, cfg)
    w = w0.copy()
    params = w.arrays()
    opt = Adam(params, tcfg.adam_beta, tcfg.adam_beta2, tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.seed)
    batches_per_epoch = math.ceil(len(data) / tcfg.batch_size)
    total = tcfg.epochs * batches_per_epoch
    step = 0
    trace = []
    last_good = w.copy()
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            acc = [np.zeros_like(p) for p in params]
            for i in idx:
                truth, b, prior = data[i]
                loss, grads = unrolled_loss_grad(truth, b, prior, w, cfg, ops.A)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss in epoch {epoch}", last_good)
                losses.append(loss)
                for a, g in zip(acc, grads):
                    a += g / len(idx)
            acc, _ = clip_global_norm(acc, tcfg.grad_clip_norm)
            opt.step(acc, cosine_lr(tcfg.lr_init, step, total))
            step += 1
        if not all(np.isfinite(p).all() for p in params):
            raise TrainingError(f"non-finite weights after epoch {epoch}", last_good)
        last_good = w.copy()
        trace.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6g", epoch, trace[-1])
        if callback is not None:
            callback(epoch, trace[-1], w)
    return w, trace


def save_checkpoint(path, w: nn.NetworkWeights, cfg: LRPEConfig, geom: GeometryConfig,
                    seed: int = 0) -> None:
    """Weights in LRPW format plus a ``<path>.meta`` key-value sidecar."""
    from .io import write_kv

    nn.save_weights(path, w)
    write_kv(str(path) + ".meta", {
        "stages": cfg.stages, "eta": cfg.eta, "n_p": cfg.n_p,
        "fidelity": cfg.fidelity, "use_prior": int(cfg.use_prior),
        "seed": seed, "geometry_hash": geom.content_hash(),
    })


def load_checkpoint(path) -> tuple[nn.NetworkWeights, dict]:
    from .io import read_kv

    meta_path = str(path) + ".meta"
    try:
        meta = read_kv(meta_path)
    except FileNotFoundError:
        meta = {}
    return nn.load_weights(path), meta
