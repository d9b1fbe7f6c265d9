"""Three-layer convolutional residual blocks with hand-written backprop.

Activations are ``(channels, H, W)`` float arrays.  Each block computes

    out = skip + K3 * phi(K2 * phi(K1 * x + b1) + b2) + b3

with 3x3 kernels, stride 1 and zero ("SAME") padding, where ``*`` is
cross-correlation and ``phi(x) = 0.5 * log(1 + x**2)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

HIDDEN = 32


def activation(x):
    return 0.5 * np.log1p(np.square(x))


def activation_deriv(x):
    return x / (1.0 + np.square(x))


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise ValueError(f"kernel must be (out, in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias length must equal output channels")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.kernel.copy(), self.bias.copy())


@dataclass
class ResidualBlockWeights:
    layers: tuple[ConvLayer, ConvLayer, ConvLayer]

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValueError("a residual block has exactly three layers")
        k1, k2, k3 = self.layers
        if k1.c_out != k2.c_in or k2.c_out != k3.c_in:
            raise ValueError("layer channel chain is inconsistent")

    @property
    def c_in(self) -> int:
        return self.layers[0].c_in

    @property
    def c_out(self) -> int:
        return self.layers[2].c_out

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in (layer.kernel, layer.bias)]

    def copy(self) -> "ResidualBlockWeights":
        return ResidualBlockWeights(tuple(layer.copy() for layer in self.layers))

    @classmethod
    def zeros(cls, c_in: int, c_out: int, hidden: int = HIDDEN) -> "ResidualBlockWeights":
        chain = [(hidden, c_in), (hidden, hidden), (c_out, hidden)]
        return cls(tuple(ConvLayer(np.zeros((o, i, 3, 3)), np.zeros(o)) for o, i in chain))


@dataclass
class NetworkWeights:
    """Image-domain block ``r_net`` and sinogram-domain block ``s_net``."""

    r_net: ResidualBlockWeights
    s_net: ResidualBlockWeights

    def __post_init__(self):
        for blk in (self.r_net, self.s_net):
            if blk.c_in != blk.c_out + 1:
                raise ValueError("block input must carry n_p state channels plus one extra")
        if self.r_net.c_out != self.s_net.c_out:
            raise ValueError("r_net and s_net must share n_p")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ValueError("non-finite weights")

    @property
    def n_p(self) -> int:
        return self.r_net.c_out

    def arrays(self) -> list[np.ndarray]:
        return self.r_net.arrays() + self.s_net.arrays()

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.r_net.copy(), self.s_net.copy())

    @classmethod
    def zeros(cls, n_p: int = 5, hidden: int = HIDDEN) -> "NetworkWeights":
        return cls(ResidualBlockWeights.zeros(n_p + 1, n_p, hidden),
                   ResidualBlockWeights.zeros(n_p + 1, n_p, hidden))


def im2col(x):
    """``(C, H, W) -> (C*9, H*W)`` patch matrix for a SAME 3x3 stencil."""
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    v = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return v.transpose(0, 3, 4, 1, 2).reshape(C * 9, H * W)


def col2im(cols, shape):
    """Adjoint of :func:`im2col`."""
    C, H, W = shape
    c = cols.reshape(C, 3, 3, H, W)
    xp = np.zeros((C, H + 2, W + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + H, dx:dx + W] += c[:, dy, dx]
    return xp[:, 1:-1, 1:-1]


def conv2d(x, kernel, bias=None, cols=None):
    """SAME 3x3 cross-correlation of ``x`` (C, H, W) with ``kernel`` (O, C, 3, 3)."""
    if cols is None:
        cols = im2col(x)
    O = kernel.shape[0]
    out = (kernel.reshape(O, -1) @ cols).reshape((O,) + x.shape[1:])
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_backward(x, kernel, g, cols=None):
    """Gradients of ``sum(g * conv2d(x, kernel, bias))`` w.r.t. kernel, bias and x."""
    if cols is None:
        cols = im2col(x)
    O = kernel.shape[0]
    g2 = g.reshape(O, -1)
    gk = (g2 @ cols.T).reshape(kernel.shape)
    gx = col2im(kernel.reshape(O, -1).T @ g2, x.shape)
    return gk, g2.sum(axis=1), gx


def conv2d_transpose(g, kernel):
    """Adjoint of the bias-free ``conv2d`` (input gradient only)."""
    O = kernel.shape[0]
    shape = (kernel.shape[1],) + g.shape[1:]
    return col2im(kernel.reshape(O, -1).T @ g.reshape(O, -1), shape)


def _check(w: ResidualBlockWeights, x, skip):
    if x.ndim != 3 or x.shape[0] != w.c_in:
        raise ValueError(f"input must have {w.c_in} channels, got shape {x.shape}")
    if skip.shape != (w.c_out,) + x.shape[1:]:
        raise ValueError(f"skip must have shape {(w.c_out,) + x.shape[1:]}, got {skip.shape}")


def residual_forward(w: ResidualBlockWeights, x):
    """Residual branch only; returns ``(out, cache)``."""
    k1, k2, k3 = w.layers
    c1 = im2col(x)
    h1 = conv2d(x, k1.kernel, k1.bias, c1)
    a1 = activation(h1)
    c2 = im2col(a1)
    h2 = conv2d(a1, k2.kernel, k2.bias, c2)
    a2 = activation(h2)
    c3 = im2col(a2)
    out = conv2d(a2, k3.kernel, k3.bias, c3)
    return out, (x, c1, h1, a1, c2, h2, a2, c3)


def residual_backward(w: ResidualBlockWeights, cache, g):
    """Returns ``(grad_w, grad_x)`` for the residual branch."""
    x, c1, h1, a1, c2, h2, a2, c3 = cache
    k1, k2, k3 = w.layers
    gk3, gb3, ga2 = conv2d_backward(a2, k3.kernel, g, c3)
    gh2 = ga2 * activation_deriv(h2)
    gk2, gb2, ga1 = conv2d_backward(a1, k2.kernel, gh2, c2)
    gh1 = ga1 * activation_deriv(h1)
    gk1, gb1, gx = conv2d_backward(x, k1.kernel, gh1, c1)
    grads = ResidualBlockWeights((ConvLayer(gk1, gb1), ConvLayer(gk2, gb2), ConvLayer(gk3, gb3)))
    return grads, gx


def block_forward(w: ResidualBlockWeights, x, skip):
    _check(w, x, skip)
    out, _ = residual_forward(w, x)
    return skip + out


def block_backward(w: ResidualBlockWeights, x, skip, upstream_grad):
    """Exact reverse-mode gradients of :func:`block_forward`.

    Returns ``(grad_w, grad_x, grad_skip)``; the skip path is the identity.
    """
    _check(w, x, skip)
    if upstream_grad.shape != skip.shape:
        raise ValueError("upstream gradient must match the output shape")
    _, cache = residual_forward(w, x)
    gw, gx = residual_backward(w, cache, upstream_grad)
    return gw, gx, upstream_grad


def residual_jvp(w: ResidualBlockWeights, cache, dx):
    """Jacobian-vector product of the residual branch at the cached point."""
    h1, h2 = cache[2], cache[5]
    k1, k2, k3 = w.layers
    d1 = activation_deriv(h1) * conv2d(dx, k1.kernel)
    d2 = activation_deriv(h2) * conv2d(d1, k2.kernel)
    return conv2d(d2, k3.kernel)


def xavier_init(seed: int, n_p: int = 5, hidden: int = HIDDEN) -> NetworkWeights:
    """Glorot-uniform kernels (fan counts include the 3x3 extent), zero biases."""
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    rng = np.random.default_rng(seed)

    def block():
        layers = []
        for o, i in [(hidden, n_p + 1), (hidden, hidden), (n_p, hidden)]:
            limit = np.sqrt(6.0 / (9 * i + 9 * o))
            layers.append(ConvLayer(rng.uniform(-limit, limit, (o, i, 3, 3)), np.zeros(o)))
        return ResidualBlockWeights(tuple(layers))

    return NetworkWeights(block(), block())


def jacobian_spectral_norm(w: ResidualBlockWeights, x, iters: int = 30, seed: int = 0,
                           n_state: int | None = None) -> float:
    """Largest singular value of the residual branch Jacobian at ``x``.

    Only the first ``n_state`` input channels (default: the output channel
    count) are perturbed; the remaining channels are held fixed.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n_state = w.c_out if n_state is None else n_state
    x = np.asarray(x, dtype=np.float64)
    _, cache = residual_forward(w, x)
    rng = np.random.default_rng(seed)
    v = np.zeros_like(x)
    v[:n_state] = rng.standard_normal((n_state,) + x.shape[1:])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        jv = residual_jvp(w, cache, v)
        sigma = float(np.linalg.norm(jv))
        if not np.isfinite(sigma):
            raise FloatingPointError("non-finite Jacobian product")
        if sigma == 0.0:
            return 0.0
        _, g = residual_backward(w, cache, jv)
        g[n_state:] = 0.0
        v = g / np.linalg.norm(g)
    return float(np.linalg.norm(residual_jvp(w, cache, v)))


def conv_operator_norm(kernel, shape, iters: int = 200, seed: int = 0) -> float:
    """Spectral norm of the bias-free SAME convolution on ``shape = (H, W)``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((kernel.shape[1],) + tuple(shape))
    s = 0.0
    for _ in range(iters):
        v /= np.linalg.norm(v)
        u = conv2d(v, kernel)
        s = float(np.linalg.norm(u))
        if s == 0.0:
            return 0.0
        v = conv2d_transpose(u, kernel)
    return s


def lipschitz_bound(w: ResidualBlockWeights, shape, iters: int = 200) -> float:
    """Product bound ``0.25 * prod ||K_i||`` using ``sup |phi'| = 0.5``."""
    norms = [conv_operator_norm(layer.kernel, shape, iters) for layer in w.layers]
    return 0.25 * float(np.prod(norms))


def spectral_normalize(w: ResidualBlockWeights, target: float, shape,
                       iters: int = 200) -> ResidualBlockWeights:
    """Rescale the kernels so the product Lipschitz bound equals ``target``."""
    bound = lipschitz_bound(w, shape, iters)
    if bound == 0.0:
        return w.copy()
    c = (target / bound) ** (1.0 / 3.0)
    return ResidualBlockWeights(tuple(ConvLayer(l.kernel * c, l.bias.copy()) for l in w.layers))


_LRPW = b"LRPW"


def save_weights(path, w: NetworkWeights) -> None:
    """Little-endian checkpoint: magic, u16 version, u32 n_p, then per layer
    u32 kernel shape (4), f32 kernel, u32 bias length, f32 bias."""
    with open(path, "wb") as fh:
        fh.write(_LRPW)
        fh.write(struct.pack("<HI", 1, w.n_p))
        for blk in (w.r_net, w.s_net):
            for layer in blk.layers:
                fh.write(struct.pack("<4I", *layer.kernel.shape))
                fh.write(layer.kernel.astype("<f4").tobytes())
                fh.write(struct.pack("<I", layer.bias.size))
                fh.write(layer.bias.astype("<f4").tobytes())


def load_weights(path) -> NetworkWeights:
    with open(path, "rb") as fh:
        if fh.read(4) != _LRPW:
            raise ValueError(f"{path}: not an LRPW checkpoint")
        version, n_p = struct.unpack("<HI", fh.read(6))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        blocks = []
        for _ in range(2):
            layers = []
            for _ in range(3):
                shape = struct.unpack("<4I", fh.read(16))
                k = np.frombuffer(fh.read(4 * int(np.prod(shape))), "<f4").reshape(shape)
                (nb,) = struct.unpack("<I", fh.read(4))
                b = np.frombuffer(fh.read(4 * nb), "<f4")
                layers.append(ConvLayer(k.astype(np.float64), b.astype(np.float64)))
            blocks.append(ResidualBlockWeights(tuple(layers)))
    w = NetworkWeights(*blocks)
    if w.n_p != n_p:
        raise ValueError(f"{path}: header n_p={n_p} disagrees with layer shapes")
    return w
