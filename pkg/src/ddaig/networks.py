"""Network builders: label/domain classifiers, the perturbation generator
(DoTNet), and the optional spatial-transformer front end.

A NetworkHandle bundles a differentiable module with stable parameter names
so checkpoints, optimizers and gradient checks all speak the same dictionary
language. Nothing here is stochastic at inference time; train/eval mode is
tracked only as an annotation.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .layers import (
    IDENTITY_AFFINE,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    InstanceNorm,
    Layer,
    Linear,
    MaxPool2,
    ReLU,
    ResidualBlock,
    Sequential,
    Tanh,
    affine_sample,
    affine_sample_backward,
)

# role tags mixed into the rng seed so each network gets its own init stream
_INIT_STREAM = {"label": 0, "domain": 1, "dotnet": 2, "stn": 3}


def _init_rng(seed: int, role: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _INIT_STREAM[role]])


@dataclass(frozen=True)
class ClassifierConfig:
    input_shape: tuple  # (C, H, W)
    num_outputs: int
    conv_channels: int = 64
    num_conv_blocks: int = 4

    def validate(self):
        C, H, W = self.input_shape
        div = 2 ** self.num_conv_blocks
        if H % div or W % div:
            raise ValueError(
                f"input {H}x{W} not divisible by 2^{self.num_conv_blocks}")
        if self.num_outputs < 1 or self.conv_channels < 1 or self.num_conv_blocks < 1:
            raise ValueError("classifier config fields must be positive")


@dataclass(frozen=True)
class DotNetConfig:
    input_channels: int
    base_channels: int = 32
    num_res_blocks: int = 2
    use_stn: bool = False

    def validate(self):
        if self.input_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_res_blocks < 0:
            raise ValueError("num_res_blocks must be >= 0")


class DotNetBody(Layer):
    """Stem conv -> residual trunk -> (identity | global context) fusion ->
    1x1 perturbation head with Tanh. Stride 1 throughout; 3x3 convs use
    reflection padding, so any H,W >= 1 maps to the same H,W."""

    def __init__(self, in_ch, base, n_blocks, *, rng, dtype=np.float32):
        self.base = base
        self.stem = Sequential([
            ("conv", Conv2d(in_ch, base, 3, "reflect", rng=rng, dtype=dtype)),
            ("in", InstanceNorm()),
            ("relu", ReLU()),
        ])
        self.blocks = [ResidualBlock(base, "reflect", rng=rng, dtype=dtype)
                       for _ in range(n_blocks)]
        self.fusion = Sequential([
            ("conv", Conv2d(2 * base, base, 1, rng=rng, dtype=dtype)),
            ("in", InstanceNorm()),
            ("relu", ReLU()),
        ])
        # zero init: the generator starts as the identity perturbation T(x)=0
        self.final = Conv2d(base, in_ch, 1, dtype=dtype, zero_init=True)
        self.tanh = Tanh()

    def params(self):
        out = OrderedDict()
        for pname, arr in self.stem.params().items():
            out[f"stem.{pname}"] = arr
        for i, blk in enumerate(self.blocks, start=1):
            for pname, arr in blk.params().items():
                out[f"res{i}.{pname}"] = arr
        for pname, arr in self.fusion.params().items():
            out[f"fusion.{pname}"] = arr
        for pname, arr in self.final.params().items():
            out[f"final.{pname}"] = arr
        return out

    def forward(self, x):
        s, c_stem = self.stem.forward(x)
        c_blocks = []
        r = s
        for blk in self.blocks:
            r, cb = blk.forward(r)
            c_blocks.append(cb)
        B, C, H, W = r.shape
        ctx = r.mean(axis=(2, 3))
        tiled = np.broadcast_to(ctx[:, :, None, None], r.shape)
        cat = np.concatenate([r, tiled], axis=1)
        u, c_fus = self.fusion.forward(cat)
        p, c_fin = self.final.forward(u)
        y, c_tanh = self.tanh.forward(p)
        return y, (c_stem, c_blocks, r.shape, c_fus, c_fin, c_tanh)

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        c_stem, c_blocks, r_shape, c_fus, c_fin, c_tanh = cache
        B, C, H, W = r_shape
        grads = OrderedDict()
        dp, _ = self.tanh.backward(dy, c_tanh)
        du, g_fin = self.final.backward(dp, c_fin, need_dp=need_dp)
        dcat, g_fus = self.fusion.backward(du, c_fus, need_dp=need_dp)
        dr = dcat[:, :self.base].copy()
        dctx = dcat[:, self.base:].sum(axis=(2, 3))
        dr += (dctx * np.asarray(1.0 / (H * W), dtype=dy.dtype))[:, :, None, None]
        g_blocks = []
        for i in range(len(self.blocks) - 1, -1, -1):
            dr, g = self.blocks[i].backward(dr, c_blocks[i], need_dp=need_dp)
            g_blocks.append((i + 1, g))
        dx, g_stem = self.stem.backward(dr, c_stem, need_dx=need_dx, need_dp=need_dp)
        if need_dp:
            for pname, arr in g_stem.items():
                grads[f"stem.{pname}"] = arr
            for i, g in reversed(g_blocks):
                for pname, arr in g.items():
                    grads[f"res{i}.{pname}"] = arr
            for pname, arr in g_fus.items():
                grads[f"fusion.{pname}"] = arr
            for pname, arr in g_fin.items():
                grads[f"final.{pname}"] = arr
        return dx, grads


class NetworkHandle:
    """A named, parameterized differentiable function.

    kind: 'label_classifier', 'domain_classifier', 'dotnet' or
    'stn_localization'. DoTNet handles built with use_stn carry the
    localization sub-handle as `.stn` and expose its parameters under the
    'stn.' prefix.
    """

    def __init__(self, kind, net, config, stn=None):
        self.kind = kind
        self.net = net
        self.config = config
        self.stn = stn
        self.mode = "train"

    @property
    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        out = self.net.params()
        if self.stn is not None:
            for name, arr in self.stn.parameters.items():
                out[f"stn.{name}"] = arr
        return out

    def train(self):
        self.mode = "train"
        if self.stn is not None:
            self.stn.train()
        return self

    def eval(self):
        self.mode = "eval"
        if self.stn is not None:
            self.stn.eval()
        return self

    def apply(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.net.forward(x)
        return y

    def apply_with_cache(self, x):
        return self.net.forward(x)

    def backward(self, dy, cache, need_dx=True, need_dp=True):
        return self.net.backward(dy, cache, need_dx=need_dx, need_dp=need_dp)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate activations (post-flatten, pre-linear). Classifiers only."""
        if not isinstance(self.net, Sequential):
            raise TypeError(f"features() unsupported for kind {self.kind!r}")
        return self.net.forward_upto(x, "fc")

    def load_parameters(self, named: dict):
        """Copy arrays into the handle's parameters. Names and shapes must
        match exactly; mismatches are reported all at once."""
        mine = self.parameters
        problems = []
        for name in mine:
            if name not in named:
                problems.append(f"missing tensor {name} {mine[name].shape}")
        for name in named:
            if name not in mine:
                problems.append(f"unexpected tensor {name}")
        for name, arr in named.items():
            if name in mine and tuple(arr.shape) != tuple(mine[name].shape):
                problems.append(
                    f"shape mismatch for {name}: "
                    f"checkpoint {tuple(arr.shape)} vs model {tuple(mine[name].shape)}")
        if problems:
            raise ValueError("parameter mismatch:\n  " + "\n  ".join(problems))
        for name, arr in named.items():
            mine[name][...] = arr


def _build_classifier(cfg: ClassifierConfig, kind: str, role: str,
                      seed: int, dtype) -> NetworkHandle:
    cfg.validate()
    rng = _init_rng(seed, role)
    C, H, W = cfg.input_shape
    children = []
    ch = C
    for b in range(1, cfg.num_conv_blocks + 1):
        children.append((f"block{b}", Sequential([
            ("conv", Conv2d(ch, cfg.conv_channels, 3, "zeros", rng=rng, dtype=dtype)),
            ("relu", ReLU()),
            ("pool", MaxPool2()),
        ])))
        ch = cfg.conv_channels
    hf = H >> cfg.num_conv_blocks
    wf = W >> cfg.num_conv_blocks
    children.append(("flat", Flatten()))
    children.append(("fc", Linear(ch * hf * wf, cfg.num_outputs, rng=rng, dtype=dtype)))
    return NetworkHandle(kind, Sequential(children), cfg)


def build_label_classifier(cfg: ClassifierConfig, seed: int = 0,
                           dtype=np.float32) -> NetworkHandle:
    return _build_classifier(cfg, "label_classifier", "label", seed, dtype)


def build_domain_classifier(cfg: ClassifierConfig, seed: int = 0,
                            dtype=np.float32) -> NetworkHandle:
    if cfg.num_outputs < 2:
        raise ValueError(
            f"domain classifier is multi-class: need >= 2 domains, got {cfg.num_outputs}")
    return _build_classifier(cfg, "domain_classifier", "domain", seed, dtype)


def build_stn_localization(in_channels: int, seed: int = 0,
                           dtype=np.float32) -> NetworkHandle:
    """Small conv net emitting 6 affine parameters; initialized to the
    identity transform (zero weights, identity bias on the head)."""
    rng = _init_rng(seed, "stn")
    width = 16
    net = Sequential([
        ("block1", Sequential([
            ("conv", Conv2d(in_channels, width, 3, "zeros", rng=rng, dtype=dtype)),
            ("relu", ReLU()),
            ("pool", MaxPool2()),
        ])),
        ("block2", Sequential([
            ("conv", Conv2d(width, width, 3, "zeros", rng=rng, dtype=dtype)),
            ("relu", ReLU()),
            ("pool", MaxPool2()),
        ])),
        ("gap", GlobalAvgPool()),
        ("fc", Linear(width, 6, dtype=dtype, zero_init=True,
                      bias_init=IDENTITY_AFFINE)),
    ])
    return NetworkHandle("stn_localization", net, None)


def build_dotnet(cfg: DotNetConfig, seed: int = 0, dtype=np.float32) -> NetworkHandle:
    cfg.validate()
    rng = _init_rng(seed, "dotnet")
    body = DotNetBody(cfg.input_channels, cfg.base_channels,
                      cfg.num_res_blocks, rng=rng, dtype=dtype)
    stn = None
    if cfg.use_stn:
        stn = build_stn_localization(cfg.input_channels, seed=seed, dtype=dtype)
    return NetworkHandle("dotnet", body, cfg, stn=stn)


def stn_forward(localization: NetworkHandle, x: np.ndarray):
    """Warp x under the affine grid predicted by the localization net.
    Returns (warped, affine_params). Out-of-bounds samples read -1."""
    theta = localization.apply(x)
    warped, _ = affine_sample(x, theta, background=-1.0)
    return warped, theta


def transform(dotnet: NetworkHandle, x: np.ndarray, lam: float) -> np.ndarray:
    """Residual perturbation: x_t = x + lam * T(x), with |x_t - x| <= lam.

    With an STN front end, the geometric warp applies first and the
    perturbation is computed on (and added to) the warped image.
    """
    y, _ = transform_with_cache(dotnet, x, lam)
    return y


def transform_with_cache(dotnet: NetworkHandle, x: np.ndarray, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if dotnet.stn is None:
        if lam == 0:
            return x.copy(), ("plain0",)
        t, c_body = dotnet.net.forward(x)
        lam_t = np.asarray(lam, dtype=x.dtype)
        return x + lam_t * t, ("plain", c_body, lam_t)
    theta, c_loc = dotnet.stn.net.forward(x)
    warped, c_samp = affine_sample(x, theta, background=-1.0)
    if lam == 0:
        return warped, ("stn0", c_loc, c_samp)
    t, c_body = dotnet.net.forward(warped)
    lam_t = np.asarray(lam, dtype=x.dtype)
    return warped + lam_t * t, ("stn", c_loc, c_samp, c_body, lam_t)


def transform_backward(dotnet: NetworkHandle, dxt: np.ndarray, cache,
                       need_dx=True, need_dp=True):
    """Gradients of a transform_with_cache output w.r.t. the input image
    and the DoTNet parameters (STN parameters under 'stn.')."""
    tag = cache[0]
    if tag == "plain0":
        dx = dxt.copy() if need_dx else None
        return dx, OrderedDict()
    if tag == "plain":
        _, c_body, lam_t = cache
        # seeding the body with lam*dxt bakes the lam factor into every grad
        dbody, grads = dotnet.net.backward(lam_t * dxt, c_body,
                                           need_dx=need_dx, need_dp=need_dp)
        dx = dxt + dbody if need_dx else None
        return dx, grads
    if tag == "stn0":
        _, c_loc, c_samp = cache
        dwarped = dxt
        grads = OrderedDict()
    else:
        _, c_loc, c_samp, c_body, lam_t = cache
        dbody, grads = dotnet.net.backward(lam_t * dxt, c_body,
                                           need_dx=True, need_dp=need_dp)
        dwarped = dxt + dbody
    dx_samp, dtheta = affine_sample_backward(dwarped, c_samp, need_dx=need_dx)
    dx_loc, g_loc = dotnet.stn.net.backward(dtheta, c_loc,
                                            need_dx=need_dx, need_dp=need_dp)
    if need_dp:
        for pname, arr in g_loc.items():
            grads[f"stn.{pname}"] = arr
    dx = (dx_samp + dx_loc) if need_dx else None
    return dx, grads
