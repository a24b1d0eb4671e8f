"""(mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation.

Follows Hansen's tutorial formulation: weighted recombination of the best
half, a rank-one update from the evolution path and a rank-mu update from
the selected steps. Per-coordinate initial scales are handled by searching
in ``(x - x0) / sigma0`` so the internal initial covariance is the identity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


class CmaesFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CmaesConfig:
    """Optimizer settings. ``sigma0`` is a scalar or one scale per coordinate.

    For pose search the coordinates are degrees (rotation) and mm (translation).
    """

    population: int | None = None
    sigma0: float | tuple = (5.0, 5.0, 5.0, 10.0, 10.0, 10.0)
    max_evals: int = 2000
    tol_fun: float = 1e-6
    tol_x: float = 1e-9
    stall_generations: int | None = None
    ftarget: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.population is not None and self.population < 4:
            raise ValueError("population must be >= 4")
        if np.any(np.asarray(self.sigma0, dtype=float) <= 0):
            raise ValueError("sigma0 must be positive")
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma0"] = list(np.atleast_1d(self.sigma0).tolist()) if not np.isscalar(self.sigma0) else self.sigma0
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CmaesConfig":
        d = dict(d)
        if isinstance(d.get("sigma0"), list):
            d["sigma0"] = tuple(d["sigma0"])
        return cls(**d)


@dataclass
class CmaesHistory:
    generations: list = field(default_factory=list)  # dicts: gen, evals, f_best, f_gen_best, sigma, x_best
    evaluations: int = 0
    stop_reason: str = ""


def default_population(n: int) -> int:
    return 4 + int(math.floor(3.0 * math.log(n)))


def cmaes_minimize(objective, x0, config: CmaesConfig = CmaesConfig()):
    """Minimise ``objective`` from ``x0``; returns ``(x_best, f_best, history)``.

    Never calls the objective more than ``config.max_evals`` times. A
    non-finite value triggers one fresh sample for that slot; a second
    non-finite value raises :class:`CmaesFailure`.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    n = x0.size
    s0 = np.asarray(config.sigma0, dtype=np.float64)
    if s0.ndim and s0.size != n:
        raise ValueError(f"sigma0 has {s0.size} entries for a {n}-D problem")
    scale = np.broadcast_to(s0, (n,)).copy()
    lam = config.population or default_population(n)
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / float(np.sum(w * w))

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
    stall = config.stall_generations or 10 + int(math.ceil(30 * n / lam))

    rng = np.random.default_rng(config.seed)
    mean = np.zeros(n)
    sigma = 1.0
    C = np.eye(n)
    B, D = np.eye(n), np.ones(n)
    pc, ps = np.zeros(n), np.zeros(n)
    hist = CmaesHistory()
    evals = 0
    x_best, f_best = x0.copy(), math.inf
    recent = []

    def to_x(u):
        return x0 + scale * u

    def evaluate(u):
        nonlocal evals
        evals += 1
        return float(objective(to_x(u)))

    gen = 0
    while True:
        if evals + lam > config.max_evals:
            hist.stop_reason = "budget_exhausted"
            break
        Z = rng.standard_normal((lam, n))
        Y = (Z * D) @ B.T
        U = mean + sigma * Y
        F = np.empty(lam)
        for k in range(lam):
            f = evaluate(U[k])
            if not math.isfinite(f):
                if evals + (lam - k) > config.max_evals:
                    raise CmaesFailure(f"non-finite objective at evaluation {evals}, no budget to resample")
                Z[k] = rng.standard_normal(n)
                Y[k] = (Z[k] * D) @ B.T
                U[k] = mean + sigma * Y[k]
                f = evaluate(U[k])
                if not math.isfinite(f):
                    raise CmaesFailure(f"non-finite objective twice at evaluation {evals}")
            F[k] = f
        order = np.argsort(F, kind="stable")
        if F[order[0]] < f_best:
            f_best = float(F[order[0]])
            x_best = to_x(U[order[0]])
        gen += 1

        y_w = w @ Y[order[:mu]]
        mean = mean + sigma * y_w
        inv_sqrt_C_y = B @ ((B.T @ y_w) / D)
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_C_y
        ps_norm = float(np.linalg.norm(ps))
        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w
        Ysel = Y[order[:mu]]
        rank_mu = (Ysel.T * w) @ Ysel
        C = ((1 - c1 - cmu) * C + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
             + cmu * rank_mu)
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))

        C = np.triu(C) + np.triu(C, 1).T
        eigvals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(eigvals, 1e-300))

        hist.generations.append({"gen": gen, "evals": evals, "f_best": f_best,
                                 "f_gen_best": float(F[order[0]]), "sigma": sigma,
                                 "x_best": x_best.copy()})
        recent.append(float(F[order[0]]))
        if config.ftarget is not None and f_best <= config.ftarget:
            hist.stop_reason = "ftarget"
            break
        if len(recent) >= stall:
            window = recent[-stall:] + [float(F[order[-1]])]
            if max(window) - min(window) < config.tol_fun:
                hist.stop_reason = "tol_fun"
                break
        if sigma * float(D.max()) < config.tol_x:
            hist.stop_reason = "tol_x"
            break
        if D.max() / D.min() > 1e7:
            hist.stop_reason = "condition"
            break
    hist.evaluations = evals
    return x_best, f_best, hist
