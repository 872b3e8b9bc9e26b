"""Executable verifiers for the structural results behind invariant training.

Each verifier turns a proof obligation into a finite computation: the
orthogonality characterization of decomposable predictors, the explicit
construction of a representation from a feasible predictor, a randomized
check of the moment general-position condition, the orthogonality manifolds
for plotting, and the stationarity certificate for robust minimax solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import NotOrthogonalError
from .numkit import DTYPE
from .sem import Dataset, SecondMoments

ORTHOGONALITY_TOL = 1e-8


@dataclass(frozen=True)
class QuadraticRisk:
    """R(v) = v' sigma v - 2 rho . v + const, the squared-loss risk."""

    sigma: np.ndarray
    rho: np.ndarray
    const: float = 0.0
    env_id: str = ""

    def value(self, v) -> float:
        v = np.asarray(v, dtype=DTYPE)
        return float(v @ self.sigma @ v - 2.0 * self.rho @ v + self.const)

    def grad(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=DTYPE)
        return 2.0 * (self.sigma @ v - self.rho)

    @classmethod
    def from_moments(cls, m: SecondMoments) -> "QuadraticRisk":
        return cls(sigma=m.sigma_xx, rho=m.sigma_xy, const=m.y_sq, env_id=m.env_id)


def _as_risks(envs) -> list[QuadraticRisk]:
    out = []
    for env in envs:
        if isinstance(env, QuadraticRisk):
            out.append(env)
        elif isinstance(env, SecondMoments):
            out.append(QuadraticRisk.from_moments(env))
        elif isinstance(env, Dataset):
            out.append(QuadraticRisk.from_moments(SecondMoments.from_dataset(env)))
        else:
            raise TypeError(f"cannot interpret {type(env)!r} as a quadratic risk")
    return out


@dataclass(frozen=True)
class EnvironmentMoments:
    """Second moments entering the general-position condition."""

    sigma_xx: np.ndarray
    sigma_xeps: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma_xx, dtype=DTYPE)
        if np.abs(s - s.T).max() > 1e-10:
            raise ValueError("sigma_xx must be symmetric")
        eig = np.linalg.eigvalsh(s)
        if eig.min() < -1e-10:
            raise ValueError("sigma_xx must be positive semi-definite")
        object.__setattr__(self, "sigma_xx", s)
        object.__setattr__(self, "sigma_xeps", np.asarray(self.sigma_xeps, dtype=DTYPE).ravel())

    @classmethod
    def from_dataset(cls, data: Dataset) -> "EnvironmentMoments":
        if data.eps is None:
            raise ValueError("dataset carries no structural noise")
        n = data.n
        return cls(sigma_xx=data.X.T @ data.X / n, sigma_xeps=data.X.T @ data.eps / n)

    @property
    def d(self) -> int:
        return self.sigma_xx.shape[0]


@dataclass
class OrthogonalityReport:
    residuals: list[float]
    tol: float = ORTHOGONALITY_TOL

    @property
    def decomposable(self) -> bool:
        return all(r <= self.tol for r in self.residuals)


def check_orthogonality(v, risks, tol: float = ORTHOGONALITY_TOL) -> OrthogonalityReport:
    """Per-risk residual |v . grad R_e(v)|.

    All residuals below tolerance certifies that v admits a representation
    / classifier factorization that is simultaneously optimal in every
    environment.
    """
    v = np.asarray(v, dtype=DTYPE).ravel()
    residuals = [abs(float(v @ r.grad(v))) for r in _as_risks(risks)]
    return OrthogonalityReport(residuals=residuals, tol=tol)


def construct_phi_from_v(v, gradients, tol: float = ORTHOGONALITY_TOL):
    """Build (phi, w) with phi^T w = v and every gradient in Ker(phi).

    The kernel is exactly the span of the supplied gradients (which must be
    orthogonal to v); phi's rows are an orthonormal basis of the
    complement, and w is the coordinate vector of v in that basis.  Both
    postconditions are verified before returning.
    """
    v = np.asarray(v, dtype=DTYPE).ravel()
    d = v.shape[0]
    grads = [np.asarray(g, dtype=DTYPE).ravel() for g in gradients]
    for g in grads:
        if abs(float(v @ g)) > tol:
            raise NotOrthogonalError(
                f"gradient not orthogonal to v (inner product {float(v @ g):.3e})"
            )
    if grads:
        G = np.stack(grads, axis=0)
        U, s, Vt = np.linalg.svd(G, full_matrices=True)
        smax = s[0] if s.size else 0.0
        rank = int(np.sum(s > max(tol, 1e-12 * smax))) if smax > 0 else 0
        phi = Vt[rank:]  # orthonormal basis of span(gradients)^perp
    else:
        rank = 0
        phi = np.eye(d)
    if rank == 0 and phi.shape[0] != d:
        phi = np.eye(d)
    w = phi @ v
    if np.linalg.norm(phi.T @ w - v) > max(tol, 1e-8 * (1 + np.linalg.norm(v))):
        raise AssertionError("factorization failed to reproduce v")
    for g in grads:
        if np.linalg.norm(phi @ g) > max(tol, 1e-8 * (1 + np.linalg.norm(g))):
            raise AssertionError("a gradient escaped the kernel")
    return phi, w


@dataclass
class GeneralPositionReport:
    verdict: str  # "satisfied" | "violated" | "insufficient environments"
    min_span_dim: int
    required_dim: int
    env_count: int
    min_env_count: float
    witness: np.ndarray | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "satisfied"


def general_position_degree(moments, r: int, trials: int = 100, rng=None) -> GeneralPositionReport:
    """Randomized check of linear general position of degree r.

    For sampled non-zero x the span of {sigma_xx^e x - sigma_xeps^e} must
    exceed dimension d - r.  A failing x is a certificate of violation; a
    pass over all trials is probabilistic evidence only (the condition
    quantifies over all non-zero x).  With too few environments the
    verdict is "insufficient environments" regardless of the spans.
    """
    from .numkit import Rng

    moments = list(moments)
    if not moments:
        raise ValueError("need at least one environment")
    d = moments[0].d
    if r < 1 or r > d:
        raise ValueError("degree r must lie in [1, d]")
    rng = rng or Rng(0)
    need = d - r + d / r
    min_dim = d
    witness = None
    for _ in range(max(1, trials)):
        x = rng.standard_normal(d)
        while np.linalg.norm(x) < 1e-12:
            x = rng.standard_normal(d)
        M = np.stack([m.sigma_xx @ x - m.sigma_xeps for m in moments], axis=0)
        s = np.linalg.svd(M, compute_uv=False)
        smax = s[0] if s.size else 0.0
        dim = int(np.sum(s > 1e-8 * smax)) if smax > 0 else 0
        if dim < min_dim:
            min_dim = dim
            witness = x
    ok_dims = min_dim > d - r
    if len(moments) <= need:
        verdict = "insufficient environments"
    elif ok_dims:
        verdict = "satisfied"
    else:
        verdict = "violated"
    return GeneralPositionReport(
        verdict=verdict,
        min_span_dim=min_dim,
        required_dim=d - r,
        env_count=len(moments),
        min_env_count=need,
        witness=None if ok_dims else witness,
    )


@dataclass
class ManifoldClouds:
    clouds: dict
    intersections: np.ndarray
    tol: float


def _direction_grid(d: int, resolution: int) -> np.ndarray:
    if d == 2:
        theta = np.linspace(0.0, 2 * np.pi, resolution, endpoint=False)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if d == 3:
        pts = []
        for theta in np.linspace(0.0, np.pi, resolution):
            for phi in np.linspace(0.0, 2 * np.pi, resolution, endpoint=False):
                pts.append(
                    [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
                )
        return np.asarray(pts)
    raise ValueError("orthogonality clouds are only drawn for d in {2, 3}")


def sample_orthogonality_manifold(risks, resolution: int = 256, tol: float = 1e-7) -> ManifoldClouds:
    """Point clouds of {v : v . grad R_e(v) = 0} and their intersections.

    For squared-loss risks each cloud is the ellipsoid through the origin
    obtained by the radial solve t(u) = (u . rho) / (u' sigma u); the
    origin belongs to every cloud.  Intersection points satisfy every
    environment's residual within tolerance.
    """
    risks = _as_risks(risks)
    d = risks[0].sigma.shape[0]
    dirs = _direction_grid(d, resolution)
    clouds = {}
    for risk in risks:
        pts = [np.zeros(d)]
        for u in dirs:
            denom = float(u @ risk.sigma @ u)
            if denom <= 1e-14:
                continue
            t = float(u @ risk.rho) / denom
            pts.append(t * u)
        clouds[risk.env_id or f"env{len(clouds)}"] = np.asarray(pts)
    inter = []
    for pts in clouds.values():
        for v in pts:
            if all(abs(float(v @ r.grad(v))) <= tol for r in risks):
                inter.append(v)
    return ManifoldClouds(clouds=clouds, intersections=np.asarray(inter), tol=tol)


@dataclass
class KktReport:
    weights: np.ndarray
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance


def verify_robust_kkt(envs, model, tolerance: float = 1e-6) -> KktReport:
    """Stationarity certificate for an approximate minimax solution.

    Finds simplex weights minimizing || sum_e w_e grad R_e(v) ||; a small
    residual certifies v is a first-order stationary point of some
    non-negative mixture of the environment risks.
    """
    risks = _as_risks(envs)
    v = np.asarray(getattr(model, "v", model), dtype=DTYPE).ravel()
    G = np.stack([r.grad(v) for r in risks], axis=1)  # d x m
    scale = max(np.abs(G).max(), 1.0)
    kappa = 1e8 * scale
    A = np.vstack([G, kappa * np.ones((1, G.shape[1]))])
    b = np.concatenate([np.zeros(G.shape[0]), [kappa]])
    w, _ = nnls(A, b)
    total = w.sum()
    if total <= 0:
        return KktReport(weights=w, residual=float("inf"), tolerance=tolerance)
    w = w / total
    # exact equality-constrained refinement on the nnls support
    support = np.flatnonzero(w > 1e-12)
    if support.size:
        Gs = G[:, support]
        k = support.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2.0 * Gs.T @ Gs
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.zeros(k + 1)
        rhs[k] = 1.0
        try:
            sol = np.linalg.solve(kkt, rhs)
            if np.all(sol[:k] >= -1e-12):
                refined = np.zeros_like(w)
                refined[support] = np.maximum(sol[:k], 0.0)
                refined = refined / refined.sum()
                if np.linalg.norm(G @ refined) <= np.linalg.norm(G @ w):
                    w = refined
        except np.linalg.LinAlgError:
            pass
    residual = float(np.linalg.norm(G @ w))
    return KktReport(weights=w, residual=residual, tolerance=tolerance)
