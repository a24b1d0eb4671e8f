"""Registration drivers: learned-gradient descent, CMA-ES on a classical
similarity, and the two chained (coarse learned stage, CMA-ES refinement)."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .cmaes import CmaesConfig, CmaesFailure, cmaes_minimize
from .drr import ProjectionGeometry, project
from .encoder import EncoderConfig, encoder_pose_gradient, net_loss_value
from .se3 import Pose, perturb
from .similarity import METRICS
from .volume import Volume

DEG = math.pi / 180.0
TANGENT_UNITS = np.array([DEG, DEG, DEG, 1.0, 1.0, 1.0])  # search coords (deg, mm) -> tangent (rad, mm)
DEFAULT_SEARCH_BOX = (45.0, 45.0, 45.0, 100.0, 100.0, 150.0)  # deg, mm around the start pose
REGISTRATION_CMAES = CmaesConfig(population=20, tol_fun=1e-4)


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    pose: Pose
    objective: float
    stage: str

    def to_record(self) -> dict:
        return {"iter": self.iteration, "pose": self.pose.to_record(), "objective": self.objective,
                "stage": self.stage}


@dataclass
class RegistrationResult:
    trajectory: list
    evaluations: int = 0
    wall_time_s: float = 0.0
    status: str = "converged"  # converged | budget_exhausted | failed
    failed_stage: str | None = None
    message: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectory:
            raise ValueError("trajectory must be non-empty")

    @property
    def final_pose(self) -> Pose:
        return self.trajectory[-1].pose

    def stages(self) -> list:
        return [p.stage for p in self.trajectory]

    def to_dict(self) -> dict:
        return {"status": self.status, "failed_stage": self.failed_stage, "message": self.message,
                "evaluations": self.evaluations, "wall_time_s": self.wall_time_s,
                "final_pose": self.final_pose.to_record(),
                "trajectory": [p.to_record() for p in self.trajectory]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _direction(g: np.ndarray, trans_scale: float) -> np.ndarray:
    out = np.zeros(6)
    for sl, s in ((slice(0, 3), 1.0), (slice(3, 6), trans_scale)):
        n = float(np.linalg.norm(g[sl]))
        if n > 0.0:
            out[sl] = s * g[sl] / n
    return out


def net_register(V: Volume, I_x, theta0: Pose, geom: ProjectionGeometry, params: dict, iters: int = 100,
                 lr: float = 1e-2, momentum: float = 0.9, config: EncoderConfig = EncoderConfig(),
                 normalize: bool = True, trans_scale: float = 30.0) -> RegistrationResult:
    """Descend the encoder output over pose: ``theta <- theta o exp(-lr * v)``.

    ``v`` is the momentum buffer of the pose gradient. With ``normalize`` the
    gradient's rotational and translational parts are first scaled to unit
    length and ``trans_scale`` mm respectively, because training only fixes
    the gradient's direction.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    I_x = np.asarray(getattr(I_x, "data", I_x), dtype=np.float64)
    t0 = time.perf_counter()
    theta, vel = theta0, np.zeros(6)
    traj, evals = [], 0
    status, msg = "budget_exhausted", ""
    try:
        for i in range(iters):
            g, out, _ = encoder_pose_gradient(V, theta, I_x, geom, params, config, return_parts=True)
            evals += 1
            traj.append(TrajectoryPoint(i, theta, out.net_loss.item(), "net"))
            g = np.asarray(getattr(g, "as_array", lambda: g)(), dtype=np.float64)
            step = _direction(g, trans_scale) if normalize else g
            vel = momentum * vel + step
            theta = perturb(theta, -lr * vel)
        evals += 1
        traj.append(TrajectoryPoint(iters, theta, net_loss_value(I_x, project(V, theta, geom).data, params, config),
                                    "net"))
    except (ad.NumericFailure, FloatingPointError) as e:
        status, msg = "failed", str(e)
        if not traj:
            traj.append(TrajectoryPoint(0, theta0, math.nan, "net"))
    return RegistrationResult(traj, evals, time.perf_counter() - t0, status,
                              "net" if status == "failed" else None, msg)


def metric_register_cmaes(V: Volume, I_x, theta0: Pose, geom: ProjectionGeometry, metric: str = "gc",
                          config: CmaesConfig = REGISTRATION_CMAES, iteration_offset: int = 0,
                          search_box=DEFAULT_SEARCH_BOX) -> RegistrationResult:
    """CMA-ES over the tangent at ``theta0`` maximising ``metric(I_x, DRR)``.

    Search coordinates are degrees and mm. Candidates outside ``search_box``
    (``None`` disables it) score worse than any similarity value, which keeps
    the search from drifting where the volume leaves the field of view.
    The trajectory holds the start pose
    and then the best pose after every generation, with the metric value
    (higher is better) as objective, so it never degrades.
    """
    sim = METRICS[metric]
    I_x = np.asarray(getattr(I_x, "data", I_x), dtype=np.float64)
    t0 = time.perf_counter()

    def pose_of(u):
        return perturb(theta0, np.asarray(u) * TANGENT_UNITS)

    box = None if search_box is None else np.broadcast_to(np.asarray(search_box, dtype=np.float64), (6,))

    def objective(u):
        if box is not None:
            excess = np.abs(u) - box
            if np.any(excess > 0):
                return 1.0 + float(np.sum(np.maximum(excess, 0.0)))  # worse than any similarity value
        return -sim(I_x, project(V, pose_of(u), geom).data)

    traj = [TrajectoryPoint(iteration_offset, theta0, -objective(np.zeros(6)), "cmaes")]
    try:
        # the start pose render counts against the budget
        _, _, hist = cmaes_minimize(objective, np.zeros(6), replace(config, max_evals=max(1, config.max_evals - 1)))
    except (CmaesFailure, ad.NumericFailure, FloatingPointError) as e:
        return RegistrationResult(traj, 1, time.perf_counter() - t0, "failed", "cmaes", str(e))
    best, best_pose = traj[0].objective, theta0
    for rec in hist.generations:
        if -rec["f_best"] > best:
            best, best_pose = -rec["f_best"], pose_of(rec["x_best"])
        traj.append(TrajectoryPoint(iteration_offset + rec["gen"], best_pose, best, "cmaes"))
    status = "budget_exhausted" if hist.stop_reason == "budget_exhausted" else "converged"
    res = RegistrationResult(traj, 1 + hist.evaluations, time.perf_counter() - t0, status)
    res.extra["stop_reason"] = hist.stop_reason
    return res


def pipeline_register(V: Volume, I_x, theta0: Pose, geom: ProjectionGeometry, params: dict, net_iters: int = 100,
                      cmaes_config: CmaesConfig = REGISTRATION_CMAES, metric: str = "gc", net_lr: float = 1e-2,
                      encoder_config: EncoderConfig = EncoderConfig()) -> RegistrationResult:
    """Learned coarse alignment for ``net_iters`` steps, then CMA-ES from its end pose."""
    t0 = time.perf_counter()
    if net_iters <= 0:
        return metric_register_cmaes(V, I_x, theta0, geom, metric, cmaes_config)
    net = net_register(V, I_x, theta0, geom, params, net_iters, net_lr, config=encoder_config)
    if net.status == "failed":
        net.wall_time_s = time.perf_counter() - t0
        return net
    ref = metric_register_cmaes(V, I_x, net.final_pose, geom, metric, cmaes_config,
                                iteration_offset=net.trajectory[-1].iteration + 1)
    return RegistrationResult(net.trajectory + ref.trajectory, net.evaluations + ref.evaluations,
                              time.perf_counter() - t0, ref.status, ref.failed_stage, ref.message,
                              dict(ref.extra))
