"""Dual-branch correlation encoder, built on the :mod:`autodiff` tape.

Pipeline for a (fixed, moving) image pair::

    SFE (shared)      image -> stem convs + 2 Poolformer blocks + global gating
    GLD global  G(.)  residual fast-Fourier-convolution block
    GLD local   L(.)  invertible stack of affine coupling layers
    Phi_g = (G(x) - G(m))**2,  Phi_l = (L(x) - L(m))**2
    SE                spatial mean -> 5-layer MLP per branch
    net_loss = < sigmoid(s_g), sigmoid(s_l) >

Parameters are a flat ``dict[str, ndarray]``; the two uncertainty
log-scales used by the training loss live there too (``log_sigma1``,
``log_sigma2``) so that one checkpoint holds everything.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .drr import Image2D, ProjectionGeometry, project_with_jacobian
from .se3 import Pose, TangentVec
from .volume import Volume


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    channels: int = 16
    downsample: int = 4
    coupling_layers: int = 2
    coupling_hidden: int = 16
    d_se: int = 16
    mlp_hidden: tuple = (64, 64, 32)
    # test-only switch: drop every nonlinearity of the global branch
    linear_global: bool = False

    def __post_init__(self):
        if self.channels % 4:
            raise ValueError("channels must be divisible by 4")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))

    @property
    def mlp_widths(self) -> tuple:
        """Output widths of the five SE layers; the input width is ``channels``."""
        return (self.channels,) + self.mlp_hidden + (self.d_se,)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def init_params(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    C, half = config.channels, config.channels // 2
    p = {}

    def conv(name, cout, cin, k, gain=1.0):
        std = gain * math.sqrt(2.0 / (cin * k * k))
        p[name + ".w"] = rng.normal(0.0, std, size=(cout, cin, k, k))
        p[name + ".b"] = np.zeros(cout)

    def norm(name, c):
        p[name + ".g"] = np.ones(c)
        p[name + ".b"] = np.zeros(c)

    # shallow shared feature encoder
    n_stem = int(round(math.log2(config.downsample)))
    for i in range(n_stem):
        conv(f"sfe.stem{i}", C, 1 if i == 0 else C, 3)
    for blk in range(2):
        pre = f"sfe.block{blk}"
        norm(pre + ".norm1", C)
        norm(pre + ".norm2", C)
        conv(pre + ".mlp1", 2 * C, C, 1)
        conv(pre + ".mlp2", C, 2 * C, 1, gain=0.5)
    p["sfe.gate.w"] = rng.normal(0.0, 1.0 / math.sqrt(C), size=(C, C))
    p["sfe.gate.b"] = np.zeros(C)
    # global branch: residual FFC
    conv("gld.g.l2l", half, half, 3, gain=0.5)
    conv("gld.g.g2l", half, half, 3, gain=0.5)
    conv("gld.g.l2g", half, half, 3, gain=0.5)
    conv("gld.g.spec", 2 * half, 2 * half, 1, gain=0.5)
    # local branch: coupling stack
    q, hid = half, config.coupling_hidden
    for i in range(config.coupling_layers):
        for side in ("a", "b"):
            pre = f"gld.l.c{i}{side}"
            conv(pre + ".h", hid, q, 3)
            conv(pre + ".s", q, hid, 3, gain=0.1)
            conv(pre + ".t", q, hid, 3, gain=0.1)
    # similarity evaluation MLPs
    widths = config.mlp_widths
    for br in ("g", "l"):
        fan_in = config.channels
        for k, w in enumerate(widths):
            p[f"se.{br}{k}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(w, fan_in))
            p[f"se.{br}{k}.b"] = np.zeros(w)
            fan_in = w
    p["log_sigma1"] = np.zeros(())
    p["log_sigma2"] = np.zeros(())
    return p


def bind(params: dict, tape: ad.Tape | None = None) -> dict:
    """Wrap parameter arrays as tensors, as tape leaves when ``tape`` is given."""
    if tape is None:
        return {k: ad.Tensor(v) for k, v in params.items()}
    return {k: tape.leaf(v, k) for k, v in params.items()}


def _conv(x, P, name):
    return ad.conv2d(x, P[name + ".w"], P[name + ".b"])


def _as_image_tensor(img):
    if isinstance(img, ad.Tensor):
        return img
    return ad.Tensor(getattr(img, "data", img))


def _image_to_map(img):
    t = _as_image_tensor(img)
    if t.data.ndim == 2:
        H, W = t.shape
        t = ad.reshape(t, (1, H, W))
    return t


# ----------------------------------------------------------------- SFE

def sfe_forward(img, P: dict, config: EncoderConfig = EncoderConfig()) -> ad.Tensor:
    """Shared shallow features ``(C, H/ds, W/ds)``. ``P`` holds bound tensors."""
    x = _image_to_map(img)
    _, H, W = x.shape
    if H % config.downsample or W % config.downsample:
        raise ValueError(f"sfe_forward: image {H}x{W} not divisible by {config.downsample}")
    x = ad.channel_norm(x)
    n_stem = int(round(math.log2(config.downsample)))
    for i in range(n_stem):
        x = ad.avg_pool2d(ad.relu(_conv(x, P, f"sfe.stem{i}")), 2)
    for blk in range(2):
        pre = f"sfe.block{blk}"
        y = ad.channel_affine(ad.channel_norm(x), P[pre + ".norm1.g"], P[pre + ".norm1.b"])
        x = x + (ad.avg_pool2d(y, 3, 1) - y)
        y = ad.channel_affine(ad.channel_norm(x), P[pre + ".norm2.g"], P[pre + ".norm2.b"])
        x = x + _conv(ad.relu(_conv(y, P, pre + ".mlp1")), P, pre + ".mlp2")
    gate = ad.sigmoid(ad.matmul(P["sfe.gate.w"], ad.global_avg_pool(x)) + P["sfe.gate.b"])
    return ad.channel_affine(x, gate)


# ----------------------------------------------------------------- GLD

def global_branch(x, P: dict, config: EncoderConfig = EncoderConfig()) -> ad.Tensor:
    """Residual fast Fourier convolution: ``x + act([l2l(xl) + g2l(xg), spec(xg) + l2g(xl)])``."""
    act = (lambda t: t) if config.linear_global else ad.relu
    xl, xg = ad.split_channels(x)
    W = x.shape[2]
    spec = ad.irfft2(act(_conv(ad.rfft2(xg), P, "gld.g.spec")), W)
    out_l = _conv(xl, P, "gld.g.l2l") + _conv(xg, P, "gld.g.g2l")
    out_g = spec + _conv(xl, P, "gld.g.l2g")
    return x + act(ad.concat_channels([out_l, out_g]))


def _coupling_st(h_in, P, pre):
    h = ad.relu(_conv(h_in, P, pre + ".h"))
    return ad.tanh(_conv(h, P, pre + ".s")), _conv(h, P, pre + ".t")


def inn_forward(x, P: dict, config: EncoderConfig = EncoderConfig()) -> ad.Tensor:
    """Stack of coupling layers: ``y1 = c1*exp(s(c2)) + t(c2)``, ``y2 = c2*exp(s'(y1)) + t'(y1)``."""
    c1, c2 = ad.split_channels(x)
    for i in range(config.coupling_layers):
        s, t = _coupling_st(c2, P, f"gld.l.c{i}a")
        c1 = c1 * ad.exp(s) + t
        s, t = _coupling_st(c1, P, f"gld.l.c{i}b")
        c2 = c2 * ad.exp(s) + t
    return ad.concat_channels([c1, c2])


def inn_inverse(y, P: dict, config: EncoderConfig = EncoderConfig()) -> ad.Tensor:
    y1, y2 = ad.split_channels(ad.constant(y))
    for i in reversed(range(config.coupling_layers)):
        s, t = _coupling_st(y1, P, f"gld.l.c{i}b")
        y2 = (y2 - t) * ad.exp(-1.0 * s)
        s, t = _coupling_st(y2, P, f"gld.l.c{i}a")
        y1 = (y1 - t) * ad.exp(-1.0 * s)
    return ad.concat_channels([y1, y2])


def gld_forward(phi_x, phi_m, P: dict, config: EncoderConfig = EncoderConfig()) -> dict:
    if phi_x.shape != phi_m.shape:
        raise ValueError(f"gld_forward: shape mismatch {phi_x.shape} vs {phi_m.shape}")
    G_x, G_m = global_branch(phi_x, P, config), global_branch(phi_m, P, config)
    L_x, L_m = inn_forward(phi_x, P, config), inn_forward(phi_m, P, config)
    return {"G_x": G_x, "G_m": G_m, "L_x": L_x, "L_m": L_m,
            "Phi_g": ad.square(G_x - G_m), "Phi_l": ad.square(L_x - L_m)}


# ----------------------------------------------------------------- SE

def _mlp(v, P, br, n_layers):
    for k in range(n_layers):
        v = ad.matmul(P[f"se.{br}{k}.w"], v) + P[f"se.{br}{k}.b"]
        if k < n_layers - 1:
            v = ad.relu(v)
    return v


def se_similarity(Phi_g, Phi_l, P: dict, config: EncoderConfig = EncoderConfig()):
    """Returns ``(s_g, s_l, net_loss)``; ``net_loss`` lies in ``(0, d_se)``."""
    n = len(config.mlp_widths)
    s_g = _mlp(ad.global_avg_pool(Phi_g), P, "g", n)
    s_l = _mlp(ad.global_avg_pool(Phi_l), P, "l", n)
    return s_g, s_l, ad.dot(ad.sigmoid(s_g), ad.sigmoid(s_l))


# ----------------------------------------------------------------- full pass

@dataclass
class EncoderOutput:
    tape: ad.Tape | None
    P: dict
    I_m: ad.Tensor
    phi_x: ad.Tensor
    phi_m: ad.Tensor
    gld: dict
    s_g: ad.Tensor
    s_l: ad.Tensor
    net_loss: ad.Tensor
    extra: dict = field(default_factory=dict)


def encoder_forward(I_x, I_m, params: dict, config: EncoderConfig = EncoderConfig(),
                    record: bool = True) -> EncoderOutput:
    """Run the whole encoder on one pair. With ``record`` the moving image and
    every parameter are leaves of a fresh tape."""
    tape = ad.Tape() if record else None
    P = bind(params, tape)
    m_arr = np.asarray(getattr(I_m, "data", I_m), dtype=np.float64)
    I_m_t = tape.leaf(m_arr, "I_m") if record else ad.Tensor(m_arr)
    phi_x = sfe_forward(I_x, P, config)
    phi_m = sfe_forward(I_m_t, P, config)
    gld = gld_forward(phi_x, phi_m, P, config)
    s_g, s_l, net_loss = se_similarity(gld["Phi_g"], gld["Phi_l"], P, config)
    return EncoderOutput(tape, P, I_m_t, phi_x, phi_m, gld, s_g, s_l, net_loss)


def net_loss_value(I_x, I_m, params, config=EncoderConfig()) -> float:
    return encoder_forward(I_x, I_m, params, config, record=False).net_loss.item()


def contract_jacobian(grad_img: np.ndarray, jac: np.ndarray) -> np.ndarray:
    """Chain an image gradient through a (6, H, W) pose Jacobian."""
    return np.tensordot(jac, grad_img, axes=([1, 2], [0, 1]))


def encoder_pose_gradient(V: Volume, pose: Pose, I_x, geom: ProjectionGeometry, params: dict,
                          config: EncoderConfig = EncoderConfig(), return_parts: bool = False):
    """d net_loss / d xi for ``pose ∘ exp(xi)`` at ``xi = 0``: image gradient from the
    tape, contracted with the renderer's pose Jacobian."""
    I_m, jac = project_with_jacobian(V, pose, geom)
    out = encoder_forward(I_x, I_m, params, config, record=True)
    g_img = ad.grad_wrt_input(out.tape, out.net_loss, out.I_m)
    g = TangentVec.from_array(contract_jacobian(g_img, jac))
    if return_parts:
        return g, out, I_m
    return g
