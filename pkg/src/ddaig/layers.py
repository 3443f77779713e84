"""Differentiable building blocks on numpy arrays.

Every layer follows the same protocol: ``forward(x) -> (y, cache)`` and
``backward(dy, cache, need_dx, need_dp) -> (dx, grads)`` where ``grads`` maps
parameter names (dotted paths for composites) to arrays of matching shape.
Parameters are plain float arrays owned by the layer; optimizers update them
in place, so the references returned by ``params()`` stay valid for the whole
life of a network.

All tensors are channels-first ``(B, C, H, W)`` except where noted. Layers
are deterministic: there is no dropout or batch statistics anywhere, so the
same input and parameters always give the same output.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import as_strided


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class; parameterless layers inherit the empty param maps."""

    def params(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# padding helpers (size-1 borders only, which is all the networks use)
# ---------------------------------------------------------------------------

def _pad1(x: np.ndarray, mode: str) -> np.ndarray:
    """Pad H and W by one pixel. mode: 'zeros' or 'reflect'.

    Reflection needs at least 2 pixels on an axis; length-1 axes fall back to
    edge replication so fully-convolutional nets stay total for H,W >= 1.
    """
    if mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    H, W = x.shape[2], x.shape[3]
    out = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)),
                 mode="reflect" if H > 1 else "edge")
    out = np.pad(out, ((0, 0), (0, 0), (0, 0), (1, 1)),
                 mode="reflect" if W > 1 else "edge")
    return out


def _pad1_backward(dyp: np.ndarray, mode: str) -> np.ndarray:
    """Fold gradients of a padded tensor back onto the unpadded one."""
    H = dyp.shape[2] - 2
    W = dyp.shape[3] - 2
    if mode == "zeros":
        return dyp[:, :, 1:H + 1, 1:W + 1]
    # Fold the W axis first (reverse of forward order), then the H axis.
    d = dyp.copy()
    core_w = d[:, :, :, 1:W + 1]
    if W > 1:
        core_w[:, :, :, 1] += d[:, :, :, 0]
        core_w[:, :, :, W - 2] += d[:, :, :, W + 1]
    else:
        core_w[:, :, :, 0] += d[:, :, :, 0] + d[:, :, :, 2]
    core = core_w[:, :, 1:H + 1, :]
    if H > 1:
        core[:, :, 1, :] += core_w[:, :, 0, :]
        core[:, :, H - 2, :] += core_w[:, :, H + 1, :]
    else:
        core[:, :, 0, :] += core_w[:, :, 0, :] + core_w[:, :, 2, :]
    return core


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> (B*H*W, C*k*k) patch matrix, H = Hp-k+1."""
    B, C, Hp, Wp = xp.shape
    H, W = Hp - k + 1, Wp - k + 1
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (B, H, W, C, k, k), (s0, s2, s3, s1, s2, s3))
    return win.reshape(B * H * W, C * k * k)


def _col2im_add(dcols: np.ndarray, B, C, Hp, Wp, k) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients into (B,C,Hp,Wp)."""
    H, W = Hp - k + 1, Wp - k + 1
    d6 = dcols.reshape(B, H, W, C, k, k)
    out = np.zeros((B, Hp, Wp, C), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + H, j:j + W, :] += d6[:, :, :, :, i, j]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


class Conv2d(Layer):
    """Stride-1 convolution, kernel 1 or 3. 3x3 kernels pad by one pixel
    ('zeros' or 'reflect'); 1x1 kernels use no padding. Spatial size is
    always preserved."""

    def __init__(self, in_ch, out_ch, ksize, pad_mode="zeros", *, rng=None,
                 dtype=np.float32, zero_init=False):
        if ksize not in (1, 3):
            raise ValueError(f"unsupported kernel size {ksize}")
        if ksize == 3 and pad_mode not in ("zeros", "reflect"):
            raise ValueError(f"unknown pad mode {pad_mode!r}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.pad_mode = pad_mode if ksize == 3 else None
        shape = (out_ch, in_ch, ksize, ksize)
        if zero_init:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = uniform_fan_in(rng, shape, in_ch * ksize * ksize, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)

    def params(self):
        return OrderedDict([("weight", self.weight), ("bias", self.bias)])

    def forward(self, x):
        B, C, H, W = x.shape
        if C != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {C}")
        k = self.ksize
        xp = _pad1(x, self.pad_mode) if k == 3 else x
        cols = _im2col(xp, k)
        w2 = self.weight.reshape(self.out_ch, -1)
        y2 = cols @ w2.T
        y2 += self.bias
        y = np.ascontiguousarray(
            y2.reshape(B, H, W, self.out_ch).transpose(0, 3, 1, 2))
        return y, (cols, x.shape)

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        cols, x_shape = cache
        B, C, H, W = x_shape
        k = self.ksize
        dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.out_ch)
        grads = OrderedDict()
        if need_dp:
            grads["weight"] = (dy2.T @ cols).reshape(self.weight.shape)
            grads["bias"] = dy2.sum(axis=0)
        dx = None
        if need_dx:
            w2 = self.weight.reshape(self.out_ch, -1)
            dcols = dy2 @ w2
            if k == 3:
                dxp = _col2im_add(dcols, B, C, H + 2, W + 2, k)
                dx = np.ascontiguousarray(_pad1_backward(dxp, self.pad_mode))
            else:
                dx = np.ascontiguousarray(
                    dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
        return dx, grads


class Linear(Layer):
    def __init__(self, in_dim, out_dim, *, rng=None, dtype=np.float32,
                 zero_init=False, bias_init=None):
        if zero_init:
            self.weight = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            self.weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim, dtype)
        if bias_init is not None:
            self.bias = np.asarray(bias_init, dtype=dtype).copy()
        else:
            self.bias = np.zeros(out_dim, dtype=dtype)

    def params(self):
        return OrderedDict([("weight", self.weight), ("bias", self.bias)])

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        x = cache
        grads = OrderedDict()
        if need_dp:
            grads["weight"] = dy.T @ x
            grads["bias"] = dy.sum(axis=0)
        dx = dy @ self.weight if need_dx else None
        return dx, grads


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        return (dy * cache if need_dx else None), OrderedDict()


class Tanh(Layer):
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        y = cache
        return (dy * (1.0 - y * y) if need_dx else None), OrderedDict()


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Requires even H and W. Ties go to the
    first position in (top-left, top-right, bottom-left, bottom-right) order
    so the backward pass is deterministic."""

    def forward(self, x):
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"MaxPool2 needs even spatial dims, got {H}x{W}")
        xr = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        xr = np.ascontiguousarray(xr).reshape(B, C, H // 2, W // 2, 4)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        if not need_dx:
            return None, OrderedDict()
        idx, (B, C, H, W) = cache
        dz = np.zeros((B, C, H // 2, W // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dz, idx[..., None], dy[..., None], axis=-1)
        dx = dz.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dx).reshape(B, C, H, W), OrderedDict()


class InstanceNorm(Layer):
    """Per-sample, per-channel normalization over H,W. No learned affine
    parameters, eps = 1e-5, biased variance."""

    eps = 1e-5

    def forward(self, x):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        ivar = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - mu) * ivar
        return xhat, (xhat, ivar)

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        if not need_dx:
            return None, OrderedDict()
        xhat, ivar = cache
        m1 = dy.mean(axis=(2, 3), keepdims=True)
        m2 = (dy * xhat).mean(axis=(2, 3), keepdims=True)
        return ivar * (dy - m1 - xhat * m2), OrderedDict()


class GlobalAvgPool(Layer):
    """(B,C,H,W) -> (B,C) spatial mean."""

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        if not need_dx:
            return None, OrderedDict()
        B, C, H, W = cache
        scale = np.asarray(1.0 / (H * W), dtype=dy.dtype)
        return np.broadcast_to((dy * scale)[:, :, None, None], (B, C, H, W)).copy(), OrderedDict()


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        return (dy.reshape(cache) if need_dx else None), OrderedDict()


class Sequential(Layer):
    """Named chain of layers. Parameter paths are '<name>.<param>'."""

    def __init__(self, children):
        self.children = list(children)

    def params(self):
        out = OrderedDict()
        for name, child in self.children:
            for pname, arr in child.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def forward(self, x):
        caches = []
        for _, child in self.children:
            x, c = child.forward(x)
            caches.append(c)
        return x, caches

    def forward_upto(self, x, stop: str):
        """Run children up to but excluding the one called `stop`."""
        for name, child in self.children:
            if name == stop:
                return x
            x, _ = child.forward(x)
        raise KeyError(f"no child named {stop!r}")

    def backward(self, dy, caches, need_dx=True, need_dp=True):
        grads = OrderedDict()
        for i in range(len(self.children) - 1, -1, -1):
            name, child = self.children[i]
            want_dx = need_dx or i > 0
            dy, g = child.backward(dy, caches[i], need_dx=want_dx, need_dp=need_dp)
            for pname, arr in g.items():
                grads[f"{name}.{pname}"] = arr
        return (dy if need_dx else None), grads


class ResidualBlock(Layer):
    """y = x + body(x); body is conv-IN-ReLU-conv-IN with 3x3 kernels."""

    def __init__(self, channels, pad_mode="reflect", *, rng, dtype=np.float32):
        self.body = Sequential([
            ("conv1", Conv2d(channels, channels, 3, pad_mode, rng=rng, dtype=dtype)),
            ("in1", InstanceNorm()),
            ("relu1", ReLU()),
            ("conv2", Conv2d(channels, channels, 3, pad_mode, rng=rng, dtype=dtype)),
            ("in2", InstanceNorm()),
        ])

    def params(self):
        return self.body.params()

    def forward(self, x):
        r, cache = self.body.forward(x)
        return x + r, cache

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        dxb, grads = self.body.backward(dy, cache, need_dx=need_dx, need_dp=need_dp)
        dx = dy + dxb if need_dx else None
        return dx, grads


# ---------------------------------------------------------------------------
# affine grid sampling (spatial transformer machinery)
# ---------------------------------------------------------------------------

def _affine_pixel_grid(theta: np.ndarray, H: int, W: int):
    """Source pixel coordinates for each target pixel under `theta`.

    `theta` is (B,6), rows (a, b, tx, c, d, ty) acting on normalized
    coordinates in [-1, 1] (align-corners convention). The arithmetic is
    arranged so the identity transform lands exactly on integer pixel
    coordinates, which makes identity warps bitwise copies.
    """
    B = theta.shape[0]
    dt = theta.dtype
    cW = np.asarray((W - 1) / 2.0, dtype=dt)
    cH = np.asarray((H - 1) / 2.0, dtype=dt)
    xs = np.arange(W, dtype=dt) - cW          # (W,)
    ys = np.arange(H, dtype=dt) - cH          # (H,)
    a, b, tx = theta[:, 0], theta[:, 1], theta[:, 2]
    c, d, ty = theta[:, 3], theta[:, 4], theta[:, 5]
    zero = np.zeros_like(a)
    bx = b * (cW / cH) if H > 1 else zero
    cy = c * (cH / cW) if W > 1 else zero
    px = (a[:, None, None] * xs[None, None, :]
          + bx[:, None, None] * ys[None, :, None]
          + (tx * cW + cW)[:, None, None])
    py = (cy[:, None, None] * xs[None, None, :]
          + d[:, None, None] * ys[None, :, None]
          + (ty * cH + cH)[:, None, None])
    return px, py  # each (B,H,W)


def affine_sample(x: np.ndarray, theta: np.ndarray, background: float = -1.0):
    """Bilinear sampling of `x` (B,C,H,W) at affine grid `theta` (B,6).

    Out-of-bounds reads return `background`. Returns (y, cache).
    """
    B, C, H, W = x.shape
    px, py = _affine_pixel_grid(theta, H, W)
    px = np.clip(px, -2.0, W + 1.0)
    py = np.clip(py, -2.0, H + 1.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.arange(B)[:, None, None]
    bg = np.asarray(background, dtype=x.dtype)

    corners = []
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi = y0 + dy_
        xi = x0 + dx_
        inb = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        v = x[bidx, :, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]  # (B,H,W,C)
        v = np.where(inb[..., None], v, bg)
        corners.append((v, inb, yi, xi))

    wxc = wx[..., None]
    wyc = wy[..., None]
    v00, v01, v10, v11 = (c[0] for c in corners)
    out = ((1 - wyc) * ((1 - wxc) * v00 + wxc * v01)
           + wyc * ((1 - wxc) * v10 + wxc * v11))
    y = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    cache = (x.shape, theta, corners, wx, wy)
    return y, cache


def affine_sample_backward(dy: np.ndarray, cache, need_dx=True):
    """Gradients of affine_sample w.r.t. the input image and theta."""
    (B, C, H, W), theta, corners, wx, wy = cache
    dt = dy.dtype
    dyc = dy.transpose(0, 2, 3, 1)  # (B,H,W,C)
    (v00, i00, y00, x00), (v01, i01, y01, x01), \
        (v10, i10, y10, x10), (v11, i11, y11, x11) = corners

    wxc = wx[..., None]
    wyc = wy[..., None]
    w00 = (1 - wyc) * (1 - wxc)
    w01 = (1 - wyc) * wxc
    w10 = wyc * (1 - wxc)
    w11 = wyc * wxc

    dx = None
    if need_dx:
        flat = np.zeros(B * C * H * W, dtype=dt)
        cidx = np.arange(C)[None, None, None, :]
        for w, inb, yi, xi in ((w00, i00, y00, x00), (w01, i01, y01, x01),
                               (w10, i10, y10, x10), (w11, i11, y11, x11)):
            contrib = dyc * w * inb[..., None]
            yc = np.clip(yi, 0, H - 1)
            xc = np.clip(xi, 0, W - 1)
            g = ((np.arange(B)[:, None, None, None] * C + cidx) * H
                 + yc[..., None]) * W + xc[..., None]
            flat += np.bincount(g.ravel(), weights=contrib.ravel(),
                                minlength=B * C * H * W)
        dx = flat.reshape(B, C, H, W).astype(dt)

    # d/dpx, d/dpy: only the interpolation weights depend on the coordinates.
    dpx = ((1 - wyc) * (v01 - v00) + wyc * (v11 - v10))
    dpy = ((1 - wxc) * (v10 - v00) + wxc * (v11 - v01))
    dpx = (dyc * dpx).sum(axis=-1)  # (B,H,W)
    dpy = (dyc * dpy).sum(axis=-1)

    cW = np.asarray((W - 1) / 2.0, dtype=dt)
    cH = np.asarray((H - 1) / 2.0, dtype=dt)
    xs = np.arange(W, dtype=dt) - cW
    ys = np.arange(H, dtype=dt) - cH
    dtheta = np.zeros((B, 6), dtype=dt)
    dtheta[:, 0] = (dpx * xs[None, None, :]).sum(axis=(1, 2))
    if H > 1:
        dtheta[:, 1] = (dpx * ys[None, :, None]).sum(axis=(1, 2)) * (cW / cH)
    dtheta[:, 2] = dpx.sum(axis=(1, 2)) * cW
    if W > 1:
        dtheta[:, 3] = (dpy * xs[None, None, :]).sum(axis=(1, 2)) * (cH / cW)
    dtheta[:, 4] = (dpy * ys[None, :, None]).sum(axis=(1, 2))
    dtheta[:, 5] = dpy.sum(axis=(1, 2)) * cH
    return dx, dtheta


IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def rotation_affine(degrees: float, dtype=np.float32) -> np.ndarray:
    """Affine parameters sampling the source rotated by `degrees` about the
    image center (counterclockwise image rotation on square images)."""
    rad = np.deg2rad(degrees)
    cs, sn = np.cos(rad), np.sin(rad)
    return np.asarray([cs, -sn, 0.0, sn, cs, 0.0], dtype=dtype)
