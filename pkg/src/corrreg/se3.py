"""Rigid poses on SE(3): exp/log maps, composition, geodesic loss, sampling.

A pose maps volume-centred coordinates (mm) into the fixed camera frame,
``x_cam = R @ x_vol + t``. Pose updates are right-composed,
``pose ∘ exp(xi)``, so tangent vectors live in the volume (body) frame.
Tangent vectors are ordered ``(omega, nu)``: rotation in radians first,
then translation in mm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
PI_MARGIN = 1e-6


class BranchAmbiguityError(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)  # array fields: compare with matrix() explicitly
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_record(self) -> dict:
        xi = log_map(self)
        return {"rot_axis_angle_rad": [float(v) for v in xi.omega],
                "trans_mm": [float(v) for v in self.translation]}

    @classmethod
    def from_record(cls, rec: dict) -> "Pose":
        R = so3_exp(np.asarray(rec["rot_axis_angle_rad"], dtype=np.float64))
        return cls(R, np.asarray(rec["trans_mm"], dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        return cls.from_record(json.loads(text))


@dataclass(frozen=True, eq=False)
class TangentVec:
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    nu: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        w = np.array(self.omega, dtype=np.float64).reshape(3)
        v = np.array(self.nu, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValueError("tangent vector entries must be finite")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "nu", v)

    @classmethod
    def from_array(cls, a) -> "TangentVec":
        a = np.asarray(a, dtype=np.float64).reshape(6)
        return cls(a[:3], a[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])


@dataclass(frozen=True)
class PoseDistribution:
    """Independent normal rotations (degrees) and translations (mm)."""

    rot_std_deg: tuple = (0.0, 0.0, 0.0)
    trans_std_mm: tuple = (0.0, 0.0, 0.0)
    rot_mean_deg: tuple = (0.0, 0.0, 0.0)
    trans_mean_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.rot_std_deg) < 0 or min(self.trans_std_mm) < 0:
            raise ValueError("standard deviations must be non-negative")

    def scaled(self, factor: float) -> "PoseDistribution":
        return PoseDistribution(
            tuple(s * factor for s in self.rot_std_deg),
            tuple(s * factor for s in self.trans_std_mm),
            self.rot_mean_deg, self.trans_mean_mm)


# Training and test distributions used in the experiments.
TRAIN_DISTRIBUTION = PoseDistribution((10.0, 10.0, 10.0), (30.0, 15.0, 15.0))
TEST_DISTRIBUTION = PoseDistribution((20.0, 20.0, 20.0), (30.0, 30.0, 60.0))


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = math.sqrt(float(omega @ omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        A, B = 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0
    else:
        A, B = math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * math.sqrt(float(w @ w))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(sin_t, cos_t)
    if theta > math.pi - PI_MARGIN:
        raise BranchAmbiguityError(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        return 0.5 * (1.0 + theta**2 / 6.0) * w
    return theta / (2.0 * sin_t) * w


def _v_matrix(omega) -> np.ndarray:
    theta = math.sqrt(float(omega @ omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        B, C = 0.5 - theta**2 / 24.0, 1.0 / 6.0 - theta**2 / 120.0
    else:
        B = (1.0 - math.cos(theta)) / theta**2
        C = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + B * K + C * (K @ K)


def exp_map(xi) -> Pose:
    if not isinstance(xi, TangentVec):
        xi = TangentVec.from_array(xi)
    return Pose(so3_exp(xi.omega), _v_matrix(xi.omega) @ xi.nu)


def log_map(p: Pose) -> TangentVec:
    omega = so3_log(p.rotation)
    nu = np.linalg.solve(_v_matrix(omega), p.translation)
    return TangentVec(omega, nu)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def perturb(p: Pose, xi) -> Pose:
    """Right-compose a tangent update: ``p ∘ exp(xi)``."""
    return compose(p, exp_map(xi))


def rotation_angle_between(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(so3_log(a.rotation.T @ b.rotation)))


def geodesic_sq(a: Pose, b: Pose, trans_scale: float = 30.0) -> float:
    """Squared rotation angle plus squared translation distance in units of ``trans_scale``."""
    if trans_scale <= 0:
        raise ValueError("trans_scale must be positive")
    phi = so3_log(a.rotation.T @ b.rotation)
    d = a.translation - b.translation
    return float(phi @ phi + d @ d / trans_scale**2)


def geodesic_grad(a: Pose, b: Pose, trans_scale: float = 30.0) -> TangentVec:
    """Gradient of :func:`geodesic_sq` under ``a -> a ∘ exp(xi)`` at ``xi = 0``.

    The rotational part is ``-2 log(R_a^T R_b)`` because the inverse Jacobian
    of SO(3) fixes its own argument; the translational part is
    ``2 R_a^T (t_a - t_b) / s^2``.
    """
    if trans_scale <= 0:
        raise ValueError("trans_scale must be positive")
    phi = so3_log(a.rotation.T @ b.rotation)
    g_trans = 2.0 * a.rotation.T @ (a.translation - b.translation) / trans_scale**2
    return TangentVec(-2.0 * phi, g_trans)


def euler_xyz_to_matrix(angles_rad) -> np.ndarray:
    """Intrinsic X-Y-Z rotation: ``R = Rx(a) @ Ry(b) @ Rz(c)``."""
    a, b, c = angles_rad
    ca, sa, cb, sb, cc, sc = math.cos(a), math.sin(a), math.cos(b), math.sin(b), math.cos(c), math.sin(c)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


def sample_euler(dist: PoseDistribution, rng: np.random.Generator):
    angles = rng.normal(np.asarray(dist.rot_mean_deg), np.asarray(dist.rot_std_deg))
    trans = rng.normal(np.asarray(dist.trans_mean_mm), np.asarray(dist.trans_std_mm))
    return angles, trans


def sample_pose(dist: PoseDistribution, rng_seed) -> Pose:
    """Draw a pose; ``rng_seed`` may be an int or a ``numpy.random.Generator``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    angles, trans = sample_euler(dist, rng)
    return Pose(euler_xyz_to_matrix(np.deg2rad(angles)), trans)
