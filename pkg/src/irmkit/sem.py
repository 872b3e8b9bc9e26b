"""Structural-equation-model data generators and their population moments.

Two families are implemented: the two-variable cause/effect model used for
all closed-form analysis (one causal feature, one anticausal feature whose
usefulness varies with the environment noise level), and the block chain
model behind the synthetic benchmark grid (causes -> targets -> effects,
optionally confounded and/or scrambled by an orthogonal mixing matrix).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownSetupError
from .numkit import DTYPE, Rng, random_orthogonal

SIGMA_SQ_MAX_DEFAULT = 100.0

SETUP_CODES = tuple(
    a + b + c for a in "FP" for b in "OE" for c in "US"
)


@dataclass(frozen=True)
class Example1Spec:
    """Two-feature SEM: x1 -> y -> x2 with environment noise sigma_sq."""

    sigma_sq: float
    n: int
    sigma_sq_max: float = SIGMA_SQ_MAX_DEFAULT

    def __post_init__(self):
        if not 0 < self.sigma_sq <= self.sigma_sq_max:
            raise ValueError(
                f"sigma_sq must lie in (0, {self.sigma_sq_max}], got {self.sigma_sq}"
            )
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class Dataset:
    """Per-environment design matrix, targets and diagnostic latents.

    ``eps`` is the structural target noise (kept for verifying moment
    assumptions in tests); it must never be fed to a learner.
    """

    X: np.ndarray
    y: np.ndarray
    env_id: str
    latents: dict = field(default_factory=dict)
    eps: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=DTYPE).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [f"x{i}" for i in range(self.d)] + ["y", "env"]
        buf.write(",".join(cols) + "\n")
        for i in range(self.n):
            row = [format(v, ".17g") for v in self.X[i]]
            row.append(format(self.y[i], ".17g"))
            row.append(str(self.env_id))
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


@dataclass(frozen=True)
class SecondMoments:
    """Population (or empirical) second moments of one environment.

    Everything the squared-loss machinery needs: E[x x^T], E[x y] and
    E[y^2].  ``n`` records the sample count when estimated from data.
    """

    sigma_xx: np.ndarray
    sigma_xy: np.ndarray
    y_sq: float
    env_id: str = ""
    n: int | None = None

    @classmethod
    def from_dataset(cls, data: Dataset) -> "SecondMoments":
        n = data.n
        return cls(
            sigma_xx=data.X.T @ data.X / n,
            sigma_xy=data.X.T @ data.y / n,
            y_sq=float(data.y @ data.y / n),
            env_id=data.env_id,
            n=n,
        )

    @property
    def d(self) -> int:
        return self.sigma_xx.shape[0]


def sample_example1(spec: Example1Spec, rng: Rng) -> Dataset:
    """Draw one environment of the two-feature model.

    The three standard-normal draws are made before scaling, so datasets
    generated with the same stream but different sigma_sq differ only
    through the noise scale, never through a different consumption order.
    """
    sigma = np.sqrt(spec.sigma_sq)
    g1 = rng.standard_normal(spec.n)
    g2 = rng.standard_normal(spec.n)
    g3 = rng.standard_normal(spec.n)
    x1 = sigma * g1
    eps = sigma * g2
    y = x1 + eps
    x2 = y + g3
    X = np.stack([x1, x2], axis=1).astype(DTYPE)
    return Dataset(X=X, y=y, env_id=f"sigma_sq={spec.sigma_sq:g}", eps=eps)


def example1_moments(sigma_sq: float) -> SecondMoments:
    """Closed-form second moments of the two-feature model.

    E[x1^2] = s, E[x1 y] = s, E[y^2] = 2s, E[x2 y] = 2s, E[x2^2] = 2s + 1,
    E[x1 x2] = s, with s = sigma_sq.
    """
    s = float(sigma_sq)
    sigma_xx = np.array([[s, s], [s, 2 * s + 1]], dtype=DTYPE)
    sigma_xy = np.array([s, 2 * s], dtype=DTYPE)
    return SecondMoments(sigma_xx, sigma_xy, y_sq=2 * s, env_id=f"sigma_sq={s:g}")


def example1_population_coeffs(sigma_sq: float, which: str) -> np.ndarray:
    """Closed-form least-squares coefficients for the three regressions.

    which: "x1only" -> (1, 0); "x2only" -> (0, s / (s + 1/2));
    "both" -> (1 / (s + 1), s / (s + 1)).
    """
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    s = float(sigma_sq)
    key = which.lower()
    if key == "x1only":
        return np.array([1.0, 0.0], dtype=DTYPE)
    if key == "x2only":
        return np.array([0.0, s / (s + 0.5)], dtype=DTYPE)
    if key == "both":
        return np.array([1.0 / (s + 1.0), s / (s + 1.0)], dtype=DTYPE)
    raise ValueError(f"unknown regression subset {which!r}")


@dataclass(frozen=True)
class ChainWeights:
    """Mechanism weights shared by every environment of one experiment."""

    w_1_to_y: np.ndarray
    w_y_to_2: np.ndarray
    w_h_to_1: np.ndarray
    w_h_to_y: np.ndarray
    w_h_to_2: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_1_to_y.shape[0]

    @property
    def causal_coeffs(self) -> np.ndarray:
        """Coefficients of the scalar target on the causal block.

        The target is the coordinate sum of the Y block, so the population
        regression of y on Z1 (fully-observed case) is the row sums of
        the cause->target weight matrix.
        """
        return self.w_1_to_y.sum(axis=1)


@dataclass(frozen=True)
class ChainSemSpec:
    """One environment of the chain SEM.

    ``env_scale`` is the e in N(0, e^2) for the latent cause and hidden
    confounder; homoskedastic setups put e^2 on the target noise, the
    heteroskedastic ones move it to the effect block.
    """

    env_scale: float
    dim: int
    scrambled: bool
    partially_observed: bool
    heteroskedastic: bool
    weights: ChainWeights
    scramble: np.ndarray
    n: int = 1000

    def __post_init__(self):
        if self.env_scale <= 0:
            raise ValueError("env_scale must be positive")
        d = 2 * self.dim
        if self.scramble.shape != (d, d):
            raise ValueError("scramble must be (2*dim, 2*dim)")
        if self.scrambled:
            err = np.abs(self.scramble.T @ self.scramble - np.eye(d)).max()
            if err > 1e-10:
                raise ValueError(f"scramble not orthogonal (max error {err:.2e})")
        elif not np.array_equal(self.scramble, np.eye(d)):
            raise ValueError("unscrambled spec must carry the identity matrix")
        if not self.partially_observed:
            for w in (self.weights.w_h_to_1, self.weights.w_h_to_y, self.weights.w_h_to_2):
                if np.any(w):
                    raise ValueError("fully-observed spec requires zero hidden weights")

    @property
    def noise_scales(self) -> tuple[float, float]:
        """(target noise std, effect-block noise std) for this environment."""
        e = self.env_scale
        return (1.0, e) if self.heteroskedastic else (e, 1.0)


def sample_chain_sem(spec: ChainSemSpec, rng: Rng) -> Dataset:
    """Draw one environment of the chain SEM; d = 2*dim features.

    The observed features are x = S (z1, z2); the target is the sum of
    the Y-block coordinates.  Latent blocks and the direct-path residual
    are kept for diagnostics only.
    """
    dim, n, e = spec.dim, spec.n, spec.env_scale
    w = spec.weights
    sy, s2 = spec.noise_scales
    H = rng.normal(0.0, e, (n, dim))
    z1 = rng.normal(0.0, e, (n, dim)) + H @ w.w_h_to_1
    Y = z1 @ w.w_1_to_y + rng.normal(0.0, sy, (n, dim)) + H @ w.w_h_to_y
    z2 = Y @ w.w_y_to_2 + rng.normal(0.0, s2, (n, dim)) + H @ w.w_h_to_2
    Z = np.hstack([z1, z2])
    X = Z @ spec.scramble.T
    y = Y.sum(axis=1)
    eps = y - z1 @ w.causal_coeffs
    return Dataset(
        X=X.astype(DTYPE),
        y=y,
        env_id=f"e={e:g}",
        latents={"z": Z, "h": H, "y_block": Y},
        eps=eps,
    )


@dataclass(frozen=True)
class SetupTemplate:
    """Shared weights plus an environment constructor over the scale e."""

    code: str
    dim: int
    weights: ChainWeights
    scramble: np.ndarray

    def environment(self, env_scale: float, n: int = 1000) -> ChainSemSpec:
        return ChainSemSpec(
            env_scale=env_scale,
            dim=self.dim,
            scrambled=self.code[2] == "S",
            partially_observed=self.code[0] == "P",
            heteroskedastic=self.code[1] == "E",
            weights=self.weights,
            scramble=self.scramble,
            n=n,
        )


# Mechanism weights follow the literal "Gaussian entries" convention
# (unit std).  Hidden-confounder paths are shrunk by 1/sqrt(dim) so the
# confounding bias of the invariant predictor stays O(1) as dim grows.
HIDDEN_WEIGHT_STD_SCALE = True


def make_setup(code: str, dim: int, seed: int, n: int = 1000) -> SetupTemplate:
    """Build the shared weights and scrambling for one benchmark setup.

    ``code`` is a 3-letter string from {F,P}x{O,E}x{U,S}, e.g. "FOU" or
    "PES".  Weights are drawn once per (code, dim, seed) and shared by all
    environments; only the scale e varies per environment.
    """
    code = code.upper()
    if code not in SETUP_CODES:
        raise UnknownSetupError(f"unknown setup code {code!r}; expected one of {SETUP_CODES}")
    rng = Rng(seed).stream(f"setup:{code}:dim={dim}")
    w_1_to_y = rng.normal(0.0, 1.0, (dim, dim))
    w_y_to_2 = rng.normal(0.0, 1.0, (dim, dim))
    if code[0] == "P":
        h_std = 1.0 / np.sqrt(dim) if HIDDEN_WEIGHT_STD_SCALE else 1.0
        w_h_to_1 = rng.normal(0.0, h_std, (dim, dim))
        w_h_to_y = rng.normal(0.0, h_std, (dim, dim))
        w_h_to_2 = rng.normal(0.0, h_std, (dim, dim))
    else:
        w_h_to_1 = np.zeros((dim, dim))
        w_h_to_y = np.zeros((dim, dim))
        w_h_to_2 = np.zeros((dim, dim))
    if code[2] == "S":
        scramble = random_orthogonal(2 * dim, rng.stream("scramble"))
    else:
        scramble = np.eye(2 * dim)
    weights = ChainWeights(w_1_to_y, w_y_to_2, w_h_to_1, w_h_to_y, w_h_to_2)
    return SetupTemplate(code=code, dim=dim, weights=weights, scramble=scramble)
