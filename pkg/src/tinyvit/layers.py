"""Numpy layer stack with explicit forward/backward passes.

The trainer differentiates through a fixed vocabulary of layers (convs,
depthwise convs, linear, BatchNorm, LayerNorm, GELU, windowed attention,
pooling) by chaining their hand-written backward rules; there is no
general-purpose autodiff tape.  Every backward implementation is validated
against central finite differences in the test suite.

Convention: ``forward(x, ctx)`` caches whatever backward needs only when
``ctx.training`` is set, so inference on a shared model stores nothing and is
safe to run from many threads.  ``backward(dy)`` accumulates parameter
gradients into ``self.grads`` and returns the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .rng import uniform


@dataclass
class ForwardContext:
    training: bool = False
    update_stats: bool = True
    droppath_state: list | None = None  # single-element [PcgState], shared

    def droppath_uniform(self, n: int) -> np.ndarray:
        assert self.droppath_state is not None
        s = self.droppath_state[0]
        out = np.empty(n)
        for i in range(n):
            s, out[i] = uniform(s, 0.0, 1.0)
        self.droppath_state[0] = s
        return out


INFERENCE = ForwardContext(training=False)


class Layer:
    """Base: parameter/buffer registry plus recursive traversal."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, "Layer"] = {}
        self._cache: dict = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self.children[name] = layer
        return layer

    def named_params(self, prefix: str = ""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_params(prefix + cname + ".")

    def named_grads(self, prefix: str = ""):
        for name, g in self.grads.items():
            yield prefix + name, g
        for cname, child in self.children.items():
            yield from child.named_grads(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0
        for child in self.children.values():
            child.zero_grads()

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class InitStream:
    """Deterministic truncated-normal parameter initializer.

    One stream is threaded through model construction in definition order,
    so a (config, seed) pair always produces identical parameters.  Backed by
    numpy's vectorized PCG64 generator; unlike the augmentation decoder, the
    init stream is not part of any on-disk replay contract.
    """

    def __init__(self, seed: int, std: float = 0.02):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.std = std
        self.truncate = 2.0

    def trunc_normal(self, shape: tuple[int, ...], dtype,
                     std: float | None = None) -> np.ndarray:
        std = self.std if std is None else std
        arr = self.rng.normal(0.0, std, size=shape)
        bound = self.truncate * std
        bad = np.abs(arr) > bound
        while bad.any():
            arr[bad] = self.rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(arr) > bound
        return arr.astype(dtype)


class Conv2d(Layer):
    """Dense KxK convolution, no bias (always followed by a norm).

    Implemented as one GEMM per kernel tap over strided views, which keeps
    both directions exact, simple and deterministic.
    """

    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int,
                 init: InitStream | None = None, dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        # He-style fan-in scaling: convolutions sit on non-residual paths,
        # where a flat 0.02 sigma would collapse the forward signal.
        std = (2.0 / (cin * k * k)) ** 0.5
        w = (init.trunc_normal((cout, cin, k, k), dtype, std=std)
             if init is not None
             else np.zeros((cout, cin, k, k), dtype=dtype))
        self.add_param("w", w)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.padding - self.k) // self.stride + 1,
                (w + 2 * self.padding - self.k) // self.stride + 1)

    def forward(self, x, ctx):
        n, _, h, w = x.shape
        ho, wo = self.out_hw(h, w)
        p, s, k = self.padding, self.stride, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        weight = self.params["w"]
        out = np.zeros((n, self.cout, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                view = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                out += np.einsum("nchw,oc->nohw", view, weight[:, :, i, j],
                                 optimize=True)
        if ctx.training:
            self._cache = {"xp": xp, "x_shape": x.shape, "out_hw": (ho, wo)}
        return out

    def backward(self, dy):
        xp = self._cache["xp"]
        n, c, hp, wp = xp.shape
        ho, wo = self._cache["out_hw"]
        p, s, k = self.padding, self.stride, self.k
        weight = self.params["w"]
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                view = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                self.grads["w"][:, :, i, j] += np.einsum(
                    "nchw,nohw->oc", view, dy, optimize=True)
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                    "nohw,oc->nchw", dy, weight[:, :, i, j], optimize=True)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class DepthwiseConv2d(Layer):
    """KxK convolution with one filter per channel, no bias."""

    def __init__(self, channels: int, k: int, stride: int, padding: int,
                 init: InitStream | None = None, dtype=np.float32):
        super().__init__()
        self.channels, self.k = channels, k
        self.stride, self.padding = stride, padding
        std = (2.0 / (k * k)) ** 0.5
        w = (init.trunc_normal((channels, k, k), dtype, std=std)
             if init is not None
             else np.zeros((channels, k, k), dtype=dtype))
        self.add_param("w", w)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.padding - self.k) // self.stride + 1,
                (w + 2 * self.padding - self.k) // self.stride + 1)

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        ho, wo = self.out_hw(h, w)
        p, s, k = self.padding, self.stride, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        weight = self.params["w"]
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                view = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                out += view * weight[None, :, i, j, None, None]
        if ctx.training:
            self._cache = {"xp": xp, "out_hw": (ho, wo)}
        return out

    def backward(self, dy):
        xp = self._cache["xp"]
        ho, wo = self._cache["out_hw"]
        p, s, k = self.padding, self.stride, self.k
        weight = self.params["w"]
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                view = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                self.grads["w"][:, i, j] += (view * dy).sum(axis=(0, 2, 3))
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += \
                    dy * weight[None, :, i, j, None, None]
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class BatchNorm2d(Layer):
    """NCHW batch norm; batch statistics while training, running stats at
    inference (torch conventions: biased variance for normalization,
    unbiased in the running average, momentum 0.1)."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, ctx):
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if ctx.training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            ivstd = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu[None, :, None, None]) * ivstd[None, :, None, None]
            if ctx.update_stats:
                m = self.momentum
                unbiased = var * (n / max(n - 1, 1))
                self.buffers["running_mean"] *= (1 - m)
                self.buffers["running_mean"] += m * mu.astype(x.dtype)
                self.buffers["running_var"] *= (1 - m)
                self.buffers["running_var"] += m * unbiased.astype(x.dtype)
            self._cache = {"xhat": xhat, "ivstd": ivstd, "n": n}
            return g * xhat + b
        rm = self.buffers["running_mean"][None, :, None, None]
        rv = self.buffers["running_var"][None, :, None, None]
        return g * (x - rm) / np.sqrt(rv + self.eps) + b

    def backward(self, dy):
        xhat, ivstd, n = (self._cache["xhat"], self._cache["ivstd"],
                          self._cache["n"])
        g = self.params["gamma"]
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        coeff = (g * ivstd / n)[None, :, None, None]
        return coeff * (n * dy
                        - dbeta[None, :, None, None]
                        - xhat * dgamma[None, :, None, None])


class LayerNorm(Layer):
    """Normalization over the trailing feature axis."""

    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.add_param("beta", np.zeros(dim, dtype=dtype))

    def forward(self, x, ctx):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        ivstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * ivstd
        if ctx.training:
            self._cache = {"xhat": xhat, "ivstd": ivstd}
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy):
        xhat, ivstd = self._cache["xhat"], self._cache["ivstd"]
        d = xhat.shape[-1]
        axes = tuple(range(dy.ndim - 1))
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        return ivstd / d * (d * dxhat
                            - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))


class Linear(Layer):
    def __init__(self, din: int, dout: int, init: InitStream | None = None,
                 dtype=np.float32):
        super().__init__()
        self.din, self.dout = din, dout
        w = (init.trunc_normal((dout, din), dtype) if init is not None
             else np.zeros((dout, din), dtype=dtype))
        self.add_param("w", w)
        self.add_param("b", np.zeros(dout, dtype=dtype))

    def forward(self, x, ctx):
        if ctx.training:
            self._cache = {"x": x}
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, dy):
        x = self._cache["x"]
        x2 = x.reshape(-1, self.din)
        dy2 = dy.reshape(-1, self.dout)
        self.grads["w"] += dy2.T @ x2
        self.grads["b"] += dy2.sum(axis=0)
        return (dy2 @ self.params["w"]).reshape(x.shape)


class GELU(Layer):
    """Exact erf-based GELU."""

    _INV_SQRT2 = 0.7071067811865476
    _INV_SQRT_2PI = 0.3989422804014327

    def forward(self, x, ctx):
        if ctx.training:
            self._cache = {"x": x}
        return 0.5 * x * (1.0 + erf(x * self._INV_SQRT2))

    def backward(self, dy):
        x = self._cache["x"]
        cdf = 0.5 * (1.0 + erf(x * self._INV_SQRT2))
        pdf = self._INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return dy * (cdf + x * pdf)


class GlobalAvgPool(Layer):
    """(N, H, W, D) -> (N, D)."""

    def forward(self, x, ctx):
        if ctx.training:
            self._cache = {"shape": x.shape}
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        n, h, w, d = self._cache["shape"]
        return np.broadcast_to(dy[:, None, None, :] / (h * w),
                               (n, h, w, d)).copy()


def relative_position_index(window: int) -> np.ndarray:
    """(w^2, w^2) map from token pair to flat (2w-1)^2 bias-table slot."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    return (rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]).astype(np.int64)


class WindowAttention(Layer):
    """Scaled dot-product attention inside non-overlapping windows with a
    learned additive relative-position bias per head.

    Grids that the window does not divide are zero-padded bottom/right; the
    padded keys are masked out of the softmax and padded query rows are
    cropped on the way out.

    The key projection carries no bias: a shared key offset shifts every
    logit of a query row equally, so the softmax is exactly invariant to it
    and the parameter would be dead weight.
    """

    def __init__(self, dim: int, num_heads: int, window: int,
                 init: InitStream | None = None, dtype=np.float32):
        super().__init__()
        if dim % num_heads:
            raise ValueError("head dimension mismatch")
        self.dim, self.num_heads, self.window = dim, num_heads, window
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        table = np.zeros((num_heads, (2 * window - 1) ** 2), dtype=dtype)
        if init is not None:
            wq = init.trunc_normal((3 * dim, dim), dtype)
            wp = init.trunc_normal((dim, dim), dtype)
        else:
            wq = np.zeros((3 * dim, dim), dtype=dtype)
            wp = np.zeros((dim, dim), dtype=dtype)
        self.add_param("qkv_w", wq)
        self.add_param("q_bias", np.zeros(dim, dtype=dtype))
        self.add_param("v_bias", np.zeros(dim, dtype=dtype))
        self.add_param("proj_w", wp)
        self.add_param("proj_b", np.zeros(dim, dtype=dtype))
        self.add_param("bias_table", table)
        self.set_window(window)

    def set_window(self, window: int) -> None:
        self.window = window
        self.rel_index = relative_position_index(window)

    def _partition(self, t: np.ndarray, n, h, w, hp, wp):
        win = self.window
        x = t.reshape(n, h, w, self.dim)
        if hp != h or wp != w:
            x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
        x = x.reshape(n, hp // win, win, wp // win, win, self.dim)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, win * win, self.dim)
        s = win * win
        return (x.reshape(-1, s, self.num_heads, self.head_dim)
                .transpose(0, 2, 1, 3))  # (B, heads, S, e)

    def _unpartition(self, t: np.ndarray, n, h, w, hp, wp):
        win = self.window
        s = win * win
        x = t.transpose(0, 2, 1, 3).reshape(-1, s, self.dim)
        x = x.reshape(n, hp // win, wp // win, win, win, self.dim)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(n, hp, wp, self.dim)
        return x[:, :h, :w, :].reshape(n, h * w, self.dim)

    def _key_mask(self, h, w, hp, wp, dtype):
        if hp == h and wp == w:
            return None
        win = self.window
        valid = np.zeros((hp, wp), dtype=bool)
        valid[:h, :w] = True
        valid = valid.reshape(hp // win, win, wp // win, win)
        valid = valid.transpose(0, 2, 1, 3).reshape(-1, win * win)
        mask = np.where(valid, dtype.type(0.0), dtype.type(-np.inf))
        return mask[:, None, None, :]  # (nw, 1, 1, S) add to (nw,h,S,S)

    def forward(self, x, ctx):
        n, h, w, d = x.shape
        win = self.window
        hp = -(-h // win) * win
        wp = -(-w // win) * win
        tokens = x.reshape(n, h * w, d)
        qkv = tokens @ self.params["qkv_w"].T
        q, k, v = np.split(qkv, 3, axis=-1)
        q = q + self.params["q_bias"]
        v = v + self.params["v_bias"]
        qw = self._partition(q, n, h, w, hp, wp)
        kw = self._partition(k, n, h, w, hp, wp)
        vw = self._partition(v, n, h, w, hp, wp)
        bias = self.params["bias_table"][:, self.rel_index]  # (heads, S, S)
        logits = (qw @ kw.transpose(0, 1, 3, 2)) * x.dtype.type(self.scale)
        logits += bias[None]
        mask = self._key_mask(h, w, hp, wp, x.dtype)
        nw = (hp // win) * (wp // win)
        if mask is not None:
            s = win * win
            logits = logits.reshape(n, nw, self.num_heads, s, s)
            logits += mask[None]
            logits = logits.reshape(n * nw, self.num_heads, s, s)
        m = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - m)
        p = e / e.sum(axis=-1, keepdims=True)
        o = p @ vw
        om = self._unpartition(o, n, h, w, hp, wp)
        out = om @ self.params["proj_w"].T + self.params["proj_b"]
        if ctx.training:
            self._cache = {"tokens": tokens, "qw": qw, "kw": kw, "vw": vw,
                           "p": p, "om": om, "dims": (n, h, w, hp, wp)}
        return out.reshape(n, h, w, d)

    def backward(self, dy):
        c = self._cache
        n, h, w, hp, wp = c["dims"]
        d = self.dim
        win = self.window
        s = win * win
        dy2 = dy.reshape(n * h * w, d)
        om2 = c["om"].reshape(n * h * w, d)
        self.grads["proj_w"] += dy2.T @ om2
        self.grads["proj_b"] += dy2.sum(axis=0)
        dom = (dy2 @ self.params["proj_w"]).reshape(n, h * w, d)
        do = self._partition(dom, n, h, w, hp, wp)
        p, qw, kw, vw = c["p"], c["qw"], c["kw"], c["vw"]
        dvw = p.transpose(0, 1, 3, 2) @ do
        dp = do @ vw.transpose(0, 1, 3, 2)
        dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dbias = dlogits.reshape(-1, self.num_heads, s, s).sum(axis=0)
        for head in range(self.num_heads):
            self.grads["bias_table"][head] += np.bincount(
                self.rel_index.ravel(), weights=dbias[head].ravel(),
                minlength=self.params["bias_table"].shape[1]).astype(dy.dtype)
        scale = dy.dtype.type(self.scale)
        dqw = (dlogits @ kw) * scale
        dkw = (dlogits.transpose(0, 1, 3, 2) @ qw) * scale
        dq = self._unpartition(dqw, n, h, w, hp, wp)
        dk = self._unpartition(dkw, n, h, w, hp, wp)
        dv = self._unpartition(dvw, n, h, w, hp, wp)
        self.grads["q_bias"] += dq.reshape(-1, d).sum(axis=0)
        self.grads["v_bias"] += dv.reshape(-1, d).sum(axis=0)
        dqkv = np.concatenate([dq, dk, dv], axis=-1)
        dqkv2 = dqkv.reshape(-1, 3 * d)
        tok2 = c["tokens"].reshape(-1, d)
        self.grads["qkv_w"] += dqkv2.T @ tok2
        dtokens = dqkv2 @ self.params["qkv_w"]
        return dtokens.reshape(n, h, w, d)


class DropPath(Layer):
    """Per-sample residual branch drop (stochastic depth), inverted scaling.

    Inactive unless the forward context carries a drop-path RNG and training
    is on; the acceptance suites never enable it.
    """

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x, ctx):
        if (not ctx.training or self.rate == 0.0
                or ctx.droppath_state is None):
            self._cache = {"mask": None}
            return x
        n = x.shape[0]
        u = ctx.droppath_uniform(n)
        keep = (u >= self.rate).astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        mask = keep.reshape((n,) + (1,) * (x.ndim - 1))
        self._cache = {"mask": mask}
        return x * mask

    def backward(self, dy):
        mask = self._cache["mask"]
        return dy if mask is None else dy * mask
