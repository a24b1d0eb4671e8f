"""Evaluation protocol: target registration error, percentile statistics,
success rate, batch runs over simulated cases, text tables and overlays."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cmaes import CmaesConfig
from .drr import Image2D, ProjectionGeometry, project
from .encoder import EncoderConfig
from .registration import REGISTRATION_CMAES, metric_register_cmaes, net_register, pipeline_register
from .se3 import TEST_DISTRIBUTION, Pose, PoseDistribution, sample_pose
from .similarity import sobel
from .volume import Volume

FRACTIONS = (0.50, 0.75, 0.95)
METHODS = ("initial", "cmaes", "net", "net+cmaes")


def mtre(pose: Pose, target: Pose, landmarks, center=None) -> float:
    """Mean 3-D distance (mm) between landmarks moved by ``pose`` and by ``target``.

    Landmarks are in volume-centred coordinates; pass ``center`` to use world
    coordinates instead (it is subtracted first).
    """
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("mtre: empty landmark set")
    if center is not None:
        pts = pts - np.asarray(center, dtype=np.float64)
    return float(np.mean(np.linalg.norm(pose.apply(pts) - target.apply(pts), axis=1)))


def percentile_stats(tres, fractions=FRACTIONS):
    """``[(f, mean, std)]`` over the ``ceil(f N)`` smallest values (population std)."""
    t = np.sort(np.asarray(tres, dtype=np.float64).ravel())
    if t.size == 0:
        raise ValueError("percentile_stats: empty list")
    out = []
    for f in fractions:
        sub = t[: max(1, math.ceil(f * t.size - 1e-9))]
        if np.all(np.isfinite(sub)):
            out.append((f, float(sub.mean()), float(sub.std())))
        else:
            out.append((f, math.inf, math.nan))
    return out


def success_rate(tres, threshold: float = 10.0) -> float:
    t = np.asarray(tres, dtype=np.float64).ravel()
    if t.size == 0:
        raise ValueError("success_rate: empty list")
    return round(100.0 * float(np.count_nonzero(t < threshold)) / t.size, 1)


@dataclass
class EvalReport:
    method: str
    tres: list
    stats: list
    sr: float
    n_cases: int
    config: dict = field(default_factory=dict)

    @classmethod
    def from_tres(cls, method, tres, config=None):
        return cls(method, [float(x) for x in tres], percentile_stats(tres), success_rate(tres), len(tres),
                   dict(config or {}))

    def row(self) -> str:
        return format_row(self.stats, self.sr)

    def cells(self) -> list:
        return [_cell(m, s) for _, m, s in self.stats] + [f"{self.sr:.1f}"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tres"] = [x if math.isfinite(x) else "inf" for x in self.tres]
        d["stats"] = [{"fraction": f, "mean": m if math.isfinite(m) else "inf",
                       "std": s if math.isfinite(s) else None} for f, m, s in self.stats]
        return d


def _cell(mean, std) -> str:
    if not math.isfinite(mean):
        return "inf"
    return f"{mean:.1f}±{std:.1f}"


def format_row(stats, sr) -> str:
    """``"98.6±98.6 | 55.7±49.9 | 24.2±14.7 | 22.0"``: three percentile cells then SR."""
    return " | ".join([_cell(m, s) for _, m, s in stats] + [f"{sr:.1f}"])


def format_table(reports) -> str:
    head = ["Method"] + [f"top {int(round(f * 100))}% mTRE(mm)" for f in FRACTIONS] + ["SR(%)"]
    rows = [[r.method] + r.cells() for r in reports]
    widths = [max(len(x[i]) for x in [head] + rows) for i in range(len(head))]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]) + "\n"


# ----------------------------------------------------------------- batch runs

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def case_seed(seed: int, index: int) -> int:
    """Seed of case ``index``: splitmix64 of ``seed + index * golden``, so each case stands alone."""
    return splitmix64((seed + index * 0x9E3779B97F4A7C15) & MASK64)


@dataclass(frozen=True, eq=False)
class Case:
    index: int
    seed: int
    target: Pose
    initial: Pose
    image: np.ndarray


def make_cases(V: Volume, geom: ProjectionGeometry, distribution: PoseDistribution, n_cases: int, seed: int,
               initial: Pose | None = None):
    """Targets drawn from ``distribution``; every case starts from ``initial`` (identity by default)."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    start = Pose.identity() if initial is None else initial
    cases = []
    for i in range(n_cases):
        cs = case_seed(seed, i)
        tgt = sample_pose(distribution, np.random.default_rng(cs))
        cases.append(Case(i, cs, tgt, start, project(V, tgt, geom).data))
    return cases


def run_method(method, V, geom, case: Case, params=None, encoder_config=EncoderConfig(),
               cmaes_config=REGISTRATION_CMAES, net_iters=100, net_lr=1e-2, metric="gc"):
    """Return the final pose for one case (``None`` on failure) and the result object."""
    if method == "initial":
        return case.initial, None
    if method == "cmaes":
        res = metric_register_cmaes(V, case.image, case.initial, geom, metric, cmaes_config)
    elif method == "net":
        res = net_register(V, case.image, case.initial, geom, params, net_iters, net_lr, config=encoder_config)
    elif method == "net+cmaes":
        res = pipeline_register(V, case.image, case.initial, geom, params, net_iters, cmaes_config, metric,
                                net_lr, encoder_config)
    else:
        raise ValueError(f"unknown method {method!r}")
    return (None if res.status == "failed" else res.final_pose), res


def batch_evaluate(V: Volume, geom: ProjectionGeometry, params, test_distribution: PoseDistribution = TEST_DISTRIBUTION,
                   n_cases: int = 30, methods=METHODS, seed: int = 0, encoder_config=EncoderConfig(),
                   cmaes_config: CmaesConfig = REGISTRATION_CMAES, net_iters: int = 100, net_lr: float = 1e-2,
                   metric: str = "gc", landmarks=None, progress=None) -> dict:
    """Run each method on one shared case set; returns ``{method: EvalReport}``.

    Case ``i`` draws its target and its CMA-ES seed from ``case_seed(seed, i)``.
    Failed registrations count as infinite TRE.
    """
    cases = make_cases(V, geom, test_distribution, n_cases, seed)
    lm = V.corner_landmarks() if landmarks is None else np.asarray(landmarks, dtype=np.float64)
    echo = {"n_cases": n_cases, "seed": seed, "net_iters": net_iters, "net_lr": net_lr, "metric": metric,
            "distribution": asdict(test_distribution), "cmaes": cmaes_config.to_dict()}
    out = {}
    for m in methods:
        tres = []
        for c in cases:
            cfg = replace(cmaes_config, seed=c.seed % (1 << 32))
            pose, _ = run_method(m, V, geom, c, params, encoder_config, cfg, net_iters, net_lr, metric)
            tres.append(math.inf if pose is None else mtre(pose, c.target, lm))
            if progress:
                progress(m, c.index, tres[-1])
        out[m] = EvalReport.from_tres(m, tres, echo)
    return out


def write_report(reports: dict, path) -> None:
    path = Path(path)
    path.write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1))
    path.with_suffix(".txt").write_text(format_table(list(reports.values())))


# ----------------------------------------------------------------- overlays

def overlay_edges(fixed, drr, percentile: float = 90.0) -> np.ndarray:
    """Gray fixed image with the DRR's strongest Sobel edges painted pure green.

    Returns ``uint8`` of shape ``(H, W, 3)``.
    """
    a = np.asarray(getattr(fixed, "data", fixed), dtype=np.float64)
    b = np.asarray(getattr(drr, "data", drr), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"overlay_edges: shape mismatch {a.shape} vs {b.shape}")
    lo, hi = float(a.min()), float(a.max())
    gray = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    g8 = np.round(gray * 255.0).astype(np.uint8)
    rgb = np.repeat(g8[:, :, None], 3, axis=2)
    gx, gy = sobel(b)
    mag = np.hypot(gx, gy)
    if mag.max() > 0.0:
        edges = mag > np.percentile(mag, percentile)
        rgb[edges] = (0, 255, 0)
    return rgb


def save_rgb(rgb: np.ndarray, path) -> Path:
    """Write PNG via Pillow when installed, else binary PPM (suffix switched to .ppm)."""
    path = Path(path)
    try:
        from PIL import Image
    except ImportError:
        path = path.with_suffix(".ppm")
        h, w, _ = rgb.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
        return path
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path)
    return path
