"""Loss stack and the online training loop for the correlation encoder.

One step draws a pose pair, renders the target and moving images, and
fits the encoder so that the pose gradient of its output points where the
gradient of the squared geodesic distance points (direction only, rotation
and translation parts separately). The parameter gradient of that
direction-matching loss needs ``d/dw (c . dL_net/dtheta)``, which is taken
by central differences of two ordinary backward passes along ``c``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .drr import ProjectionGeometry, project, project_with_jacobian
from .encoder import EncoderConfig, contract_jacobian, encoder_forward, init_params
from .se3 import TRAIN_DISTRIBUTION, PoseDistribution, geodesic_grad, perturb, sample_pose
from .volume import Volume

log = logging.getLogger(__name__)

SIGMA_KEYS = ("log_sigma1", "log_sigma2")
NORM_TINY = 1e-12


class TrainingError(RuntimeError):
    pass


# ----------------------------------------------------------------- losses

def ncc_tensor(a: ad.Tensor, b: ad.Tensor, floor: float = 1e-8) -> ad.Tensor:
    """Tape version of :func:`similarity.ncc` over all elements jointly."""
    da = a - ad.mean(a)
    db = b - ad.mean(b)
    na = ad.maximum(ad.sqrt(ad.sum(ad.square(da))), floor)
    nb = ad.maximum(ad.sqrt(ad.sum(ad.square(db))), floor)
    return ad.clip(ad.dot(da, db) / (na * nb), -1.0, 1.0)


def decomp_loss(G_x, G_m, L_x, L_m, epsilon: float = 1.01) -> ad.Tensor:
    """``NCC(G_x, G_m) / (NCC(L_x, L_m) + epsilon)``."""
    G_x, G_m, L_x, L_m = (ad.constant(t) for t in (G_x, G_m, L_x, L_m))
    return ncc_tensor(G_x, G_m) / (ncc_tensor(L_x, L_m) + epsilon)


def _parts(v):
    v = np.asarray(getattr(v, "as_array", lambda: v)(), dtype=np.float64).reshape(6)
    return v[:3], v[3:]


def _unit(v):
    n = float(np.linalg.norm(v))
    return (v / n, n) if n > NORM_TINY else (np.zeros(3), 0.0)


def appro_loss(grad_net, grad_geo) -> float:
    """Squared distance between part-wise normalised gradients; range [0, 8]."""
    total = 0.0
    for a, b in zip(_parts(grad_net), _parts(grad_geo)):
        ua, _ = _unit(a)
        ub, _ = _unit(b)
        total += float(np.sum((ua - ub) ** 2))
    return total


def appro_loss_grad(grad_net, grad_geo) -> np.ndarray:
    """d appro_loss / d grad_net (6-vector)."""
    out = []
    for a, b in zip(_parts(grad_net), _parts(grad_geo)):
        ua, na = _unit(a)
        ub, _ = _unit(b)
        if na == 0.0:
            out.append(np.zeros(3))
            continue
        r = 2.0 * (ua - ub)
        out.append((r - ua * (ua @ r)) / na)
    return np.concatenate(out)


def total_loss(l_appro, l_decomp, log_sigma1, log_sigma2):
    """Uncertainty-weighted sum; works on floats and on tape tensors."""
    if any(isinstance(x, ad.Tensor) for x in (l_appro, l_decomp, log_sigma1, log_sigma2)):
        ls1, ls2 = ad.constant(log_sigma1), ad.constant(log_sigma2)
        w1 = 0.5 * ad.exp(-2.0 * ls1)
        w2 = 0.5 * ad.exp(-2.0 * ls2)
        return w1 * l_appro + w2 * l_decomp + ls1 + ls2
    return (0.5 * math.exp(-2.0 * log_sigma1) * l_appro + 0.5 * math.exp(-2.0 * log_sigma2) * l_decomp
            + log_sigma1 + log_sigma2)


def cyclic_lr(step: int, lr_min: float, lr_max: float, cycle_steps: int) -> float:
    """Triangular schedule, period ``2 * cycle_steps``, starting at ``lr_min``."""
    if cycle_steps <= 0:
        raise ValueError("cycle_steps must be positive")
    pos = step % (2 * cycle_steps)
    frac = pos / cycle_steps if pos <= cycle_steps else 2.0 - pos / cycle_steps
    return lr_min + (lr_max - lr_min) * frac


# ----------------------------------------------------------------- config / state

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200_000
    lr_min: float = 1e-6
    lr_max: float = 1e-4
    cycle_steps: int = 100
    momentum: float = 0.9
    pose_distribution: PoseDistribution = TRAIN_DISTRIBUTION
    fd_step: float = 1e-3
    epsilon: float = 1.01
    trans_scale: float = 30.0
    decomp_weight: float = 1.0
    jitter_gain_std: float = 0.1
    jitter_noise_std: float = 0.01
    log_sigma_bounds: tuple = (-3.0, 3.0)
    grad_clip: float | None = None
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_consecutive_skips: int = 10

    def __post_init__(self):
        if self.lr_min > self.lr_max or self.iterations <= 0 or self.fd_step <= 0:
            raise ValueError("invalid training configuration")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "pose_distribution" in d and isinstance(d["pose_distribution"], dict):
            d["pose_distribution"] = PoseDistribution(**{k: tuple(v) for k, v in d["pose_distribution"].items()})
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        if "log_sigma_bounds" in d:
            d["log_sigma_bounds"] = tuple(d["log_sigma_bounds"])
        return cls(**d)


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale settings: a 10x larger learning-rate band plus global gradient clipping."""
    base = TrainConfig(iterations=2000, lr_min=1e-4, lr_max=1e-3, cycle_steps=100, grad_clip=1.0)
    return replace(base, **overrides)


@dataclass
class TrainState:
    params: dict
    velocity: dict
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, config: TrainConfig, params: dict | None = None) -> "TrainState":
        params = init_params(config.encoder, config.seed) if params is None else {k: np.array(v, dtype=np.float64)
                                                                                  for k, v in params.items()}
        return cls(params, {k: np.zeros_like(v) for k, v in params.items()}, 0,
                   np.random.default_rng([config.seed, 1]))


# ----------------------------------------------------------------- one step

def _jitter(img, config: TrainConfig, rng):
    gain = 1.0 + config.jitter_gain_std * rng.standard_normal() if config.jitter_gain_std else 1.0
    out = gain * img
    if config.jitter_noise_std:
        out = out + config.jitter_noise_std * float(np.max(np.abs(img))) * rng.standard_normal(img.shape)
    return out


def _param_grads(tape, loss, P):
    g = ad.backward(tape, loss)
    return {k: g[t] for k, t in P.items()}


def compute_gradients(params, V: Volume, geom: ProjectionGeometry, config: TrainConfig, theta, theta_t, I_x):
    """Loss values and parameter gradients of the total loss for one sample."""
    enc = config.encoder
    I_m, jac = project_with_jacobian(V, theta, geom)
    out = encoder_forward(I_x, I_m.data, params, enc, record=True)
    g_img = ad.grad_wrt_input(out.tape, out.net_loss, out.I_m)
    g_net = contract_jacobian(g_img, jac)
    g_geo = geodesic_grad(theta, theta_t, config.trans_scale).as_array()
    l_appro = appro_loss(g_net, g_geo)
    c = appro_loss_grad(g_net, g_geo)

    gd = out.gld
    l_dec_t = decomp_loss(gd["G_x"], gd["G_m"], gd["L_x"], gd["L_m"], config.epsilon)
    l_decomp = l_dec_t.item()
    g_decomp = _param_grads(out.tape, l_dec_t, out.P)

    c_norm = float(np.linalg.norm(c))
    if c_norm > 0.0:
        def net_eval(xi):
            img = project(V, perturb(theta, xi), geom)
            o = encoder_forward(I_x, img.data, params, enc, record=True)
            return o.net_loss.item(), _param_grads(o.tape, o.net_loss, o.P)

        mixed = ad.mixed_second_grad_fd(net_eval, np.zeros(6), c / c_norm, config.fd_step)
        g_appro = {k: c_norm * v for k, v in mixed.items()}
    else:
        g_appro = {k: np.zeros_like(v) for k, v in params.items()}

    ls1, ls2 = float(params["log_sigma1"]), float(params["log_sigma2"])
    w1 = 0.5 * math.exp(-2.0 * ls1)
    w2 = 0.5 * math.exp(-2.0 * ls2) * config.decomp_weight
    grads = {k: w1 * g_appro[k] + w2 * g_decomp[k] for k in params if k not in SIGMA_KEYS}
    grads["log_sigma1"] = np.asarray(1.0 - 2.0 * w1 * l_appro)
    grads["log_sigma2"] = np.asarray(1.0 - 2.0 * w2 * l_decomp) if config.decomp_weight else np.zeros(())
    l_total = total_loss(l_appro, config.decomp_weight * l_decomp, ls1, ls2)
    return {"l_appro": l_appro, "l_decomp": l_decomp, "l_total": l_total,
            "g_net": g_net, "g_geo": g_geo}, grads


def train_step(state: TrainState, V: Volume, geom: ProjectionGeometry, config: TrainConfig, rng=None):
    """Advance ``state`` by one SGD step (in place); returns ``(state, record)``.

    A numeric failure leaves the parameters untouched and returns a record
    with ``"skipped"`` set.
    """
    rng = state.rng if rng is None else rng
    dist = config.pose_distribution
    theta_t = sample_pose(dist, rng)
    theta = sample_pose(dist, rng)
    I_x = _jitter(project(V, theta_t, geom).data, config, rng)
    lr = cyclic_lr(state.step, config.lr_min, config.lr_max, config.cycle_steps)
    rec = {"iter": state.step, "lr": lr}
    try:
        vals, grads = compute_gradients(state.params, V, geom, config, theta, theta_t, I_x)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise ad.NumericFailure("train_step", "non-finite parameter gradient")
    except (ad.NumericFailure, FloatingPointError, ValueError) as e:
        log.warning("step %d skipped: %s", state.step, e)
        state.step += 1
        rec.update(skipped=str(e))
        return state, rec

    if config.grad_clip:
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for k, g in grads.items() if k not in SIGMA_KEYS))
        if gnorm > config.grad_clip:
            for k in grads:
                if k not in SIGMA_KEYS:
                    grads[k] = grads[k] * (config.grad_clip / gnorm)
    lo, hi = config.log_sigma_bounds
    for k, g in grads.items():
        v = config.momentum * state.velocity[k] + g
        state.velocity[k] = v
        state.params[k] = state.params[k] - lr * v
        if k in SIGMA_KEYS:
            state.params[k] = np.clip(state.params[k], lo, hi)
    state.step += 1
    rec.update(l_appro=vals["l_appro"], l_decomp=vals["l_decomp"], l_total=vals["l_total"],
               sigma1=math.exp(float(state.params["log_sigma1"])),
               sigma2=math.exp(float(state.params["log_sigma2"])))
    return state, rec


def train(V: Volume, geom: ProjectionGeometry, config: TrainConfig, state: TrainState | None = None,
          log_path=None, checkpoint_path=None, checkpoint_every: int = 0, progress=None):
    """Run ``config.iterations`` steps; returns ``(state, records)``."""
    state = TrainState.fresh(config) if state is None else state
    records = []
    skips = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for _ in range(config.iterations):
            state, rec = train_step(state, V, geom, config)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            skips = skips + 1 if "skipped" in rec else 0
            if skips >= config.max_consecutive_skips:
                raise TrainingError(f"{skips} consecutive skipped steps, last: {rec['skipped']}")
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state.params, checkpoint_path, config)
            if progress:
                progress(rec)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(state.params, checkpoint_path, config)
    return state, records


def save_checkpoint(params, path, config: TrainConfig | None = None):
    extra = {"encoder": asdict(config.encoder)} if config is not None else None
    ad.save_params(params, path, extra)


def load_checkpoint(path):
    """Return ``(params, EncoderConfig)``."""
    params, extra = ad.load_params(path)
    enc = EncoderConfig.from_dict(extra["encoder"]) if "encoder" in extra else EncoderConfig()
    return params, enc


def write_metrics(records, path):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))
