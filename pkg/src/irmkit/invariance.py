"""Invariance penalties: classifier-distance, normal-equation residual, and
the squared dummy-classifier gradient with its unbiased mini-batch estimator.

All penalties run in two modes: on a :class:`~irmkit.sem.Dataset` (empirical
moments) or directly on :class:`~irmkit.sem.SecondMoments` (population mode),
so the optimization-landscape study is exact rather than noisy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularGramError
from .numkit import DTYPE, as_matrix, solve_gram, solve_gram_min_norm
from .sem import Dataset, SecondMoments


@dataclass(frozen=True)
class LinearRepresentation:
    """Linear feature map h = phi @ x with phi of shape (p, d)."""

    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", as_matrix(self.phi))

    @property
    def p(self) -> int:
        return self.phi.shape[0]

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def rank(self, rel_tol: float = 1e-10) -> int:
        s = np.linalg.svd(self.phi, compute_uv=False)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > rel_tol * s[0]))


@dataclass(frozen=True)
class PenaltyValue:
    value: float
    gradient: np.ndarray | None = None

    def __post_init__(self):
        if self.value < -1e-12:
            raise ValueError("penalty values are non-negative by construction")


# --- loss functions -------------------------------------------------------

def _squared(f, y):
    return (f - y) ** 2


def _squared_d1(f, y):
    return 2.0 * (f - y)


def _squared_d2(f, y):
    return np.full_like(np.asarray(f, dtype=DTYPE), 2.0)


def _logistic(f, y):
    # softplus(f) - y*f, numerically stable for large |f|
    return np.logaddexp(0.0, f) - y * f


def _logistic_d1(f, y):
    return 1.0 / (1.0 + np.exp(-f)) - y


def _logistic_d2(f, y):
    p = 1.0 / (1.0 + np.exp(-f))
    return p * (1.0 - p)


LOSSES = {
    "squared": (_squared, _squared_d1, _squared_d2),
    "logistic": (_logistic, _logistic_d1, _logistic_d2),
}


def _moments(data) -> SecondMoments:
    if isinstance(data, SecondMoments):
        return data
    if isinstance(data, Dataset):
        return SecondMoments.from_dataset(data)
    raise TypeError(f"expected Dataset or SecondMoments, got {type(data)!r}")


def _model_outputs(model, X) -> np.ndarray:
    """Representation outputs for a linear coefficient vector or a network."""
    if isinstance(model, np.ndarray) or isinstance(model, (list, tuple)):
        v = np.asarray(model, dtype=DTYPE)
        return X @ v
    if isinstance(model, LinearRepresentation):
        return X @ model.phi.T
    if hasattr(model, "outputs"):
        return model.outputs(X)
    raise TypeError(f"cannot evaluate model of type {type(model)!r}")


# --- optimal classifier and the two discrepancies -------------------------

def optimal_classifier(phi, data, ridge: float = 0.0) -> np.ndarray:
    """Least-squares classifier on top of a fixed linear representation.

    Solves (Phi Sigma Phi^T + ridge I) w = Phi rho from the environment's
    second moments.  Singular Gram with ridge == 0 raises
    :class:`SingularGramError`.
    """
    phi = phi.phi if isinstance(phi, LinearRepresentation) else as_matrix(phi)
    m = _moments(data)
    gram = phi @ m.sigma_xx @ phi.T
    if ridge > 0:
        gram = gram + ridge * np.eye(phi.shape[0])
    return solve_gram(gram, phi @ m.sigma_xy)


def _optimal_classifier_min_norm(phi, m: SecondMoments, ridge: float = 0.0) -> np.ndarray:
    phi = phi.phi if isinstance(phi, LinearRepresentation) else as_matrix(phi)
    gram = phi @ m.sigma_xx @ phi.T
    if ridge > 0:
        gram = gram + ridge * np.eye(phi.shape[0])
    return solve_gram_min_norm(gram, phi @ m.sigma_xy)


def _optimal_classifier_predictor_ridge(phi, m: SecondMoments, ridge: float) -> np.ndarray:
    """Classifier regularized on the input-space predictor coefficients.

    argmin_w R(w o phi) + ridge ||phi^T w||^2, i.e. the ridge penalizes the
    effective regression vector rather than w itself.  This is the variant
    whose penalty landscape keeps the blow-up near degenerate
    representations: shrinking a representation column inflates the
    compensating classifier coordinate no matter how hard the regression
    itself is regularized.
    """
    phi = phi.phi if isinstance(phi, LinearRepresentation) else as_matrix(phi)
    gram = phi @ (m.sigma_xx + ridge * np.eye(phi.shape[1])) @ phi.T
    rhs = phi @ m.sigma_xy
    try:
        return solve_gram(gram, rhs)
    except SingularGramError:
        return solve_gram_min_norm(gram, rhs)


def d_dist(w, phi, data, ridge: float = 0.0) -> PenaltyValue:
    """Squared distance between w and the environment-optimal classifier.

    Exact-zero singular directions of the representation Gram fall back to
    the minimum-norm optimal classifier; this is the only completion under
    which the penalty is defined at a representation with a null column.
    """
    w = np.asarray(w, dtype=DTYPE).ravel()
    m = _moments(data)
    try:
        w_opt = optimal_classifier(phi, m, ridge)
    except SingularGramError:
        w_opt = _optimal_classifier_min_norm(phi, m, ridge)
    return PenaltyValue(value=float(np.sum((w - w_opt) ** 2)))


def d_lin(w, phi, data, with_gradient: bool = False) -> PenaltyValue:
    """Squared residual of the normal equations for classifier w.

    value = || (Phi Sigma Phi^T) w - Phi rho ||^2, a polynomial in (phi, w);
    zero exactly when w is optimal on top of phi for this environment.
    With ``with_gradient`` the analytic d(value)/d(phi) is attached.
    """
    w = np.asarray(w, dtype=DTYPE).ravel()
    phi_m = phi.phi if isinstance(phi, LinearRepresentation) else as_matrix(phi)
    m = _moments(data)
    sig_phi_w = m.sigma_xx @ (phi_m.T @ w)
    resid = phi_m @ sig_phi_w - phi_m @ m.sigma_xy
    value = float(resid @ resid)
    grad = None
    if with_gradient:
        # d||r||^2/dPhi with r = Phi(Sigma Phi^T w - rho):
        # 2 [ r (Sigma Phi^T w - rho)^T + w (Sigma Phi^T r)^T ]
        grad = 2.0 * (
            np.outer(resid, sig_phi_w - m.sigma_xy)
            + np.outer(w, m.sigma_xx @ (phi_m.T @ resid))
        )
    return PenaltyValue(value=value, gradient=grad)


# --- the squared dummy-classifier gradient --------------------------------

def dummy_gradient(model, data, loss: str = "squared") -> float:
    """d/dw of the mean loss of the predictor w * model(x) at w = 1.

    Multi-output models contribute the sum of their per-coordinate terms
    (the same scalar multiplies every output).
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {sorted(LOSSES)}")
    _, d1, _ = LOSSES[loss]
    if isinstance(data, SecondMoments):
        if loss != "squared":
            raise ValueError("population moments only support the squared loss")
        v = np.asarray(model, dtype=DTYPE).ravel()
        return float(2.0 * (v @ data.sigma_xx @ v - data.sigma_xy @ v))
    f = _model_outputs(model, data.X)
    y = data.y if f.ndim == 1 else np.broadcast_to(data.y[:, None], f.shape)
    per_example = d1(f, y) * f
    if per_example.ndim > 1:
        per_example = per_example.sum(axis=1)
    return float(per_example.mean())


def irm_penalty(model, data, loss: str = "squared") -> PenaltyValue:
    """Squared norm of the dummy-classifier gradient at w = 1.

    For a linear model v with squared loss this equals
    4 * d_lin(1.0, v^T, e): both reduce to the squared residual of the
    normal equations contracted with v (the factor comes from the loss
    derivative 2*(f - y)).
    """
    g = dummy_gradient(model, data, loss)
    return PenaltyValue(value=g * g)


def irm_penalty_minibatch(model, batch_a: Dataset, batch_b: Dataset, loss: str = "squared") -> PenaltyValue:
    """Unbiased product estimator of the squared dummy-gradient norm.

    Multiplies the dummy-classifier gradients of two independent batches of
    the same environment; with batch_a == batch_b == the full data it
    degenerates to the (biased) full-batch squared norm.
    """
    if batch_a.n != batch_b.n:
        raise ValueError(f"batch sizes differ: {batch_a.n} vs {batch_b.n}")
    if batch_a.n < 1:
        raise ValueError("batches must be non-empty")
    g_a = dummy_gradient(model, batch_a, loss)
    g_b = dummy_gradient(model, batch_b, loss)
    return PenaltyValue(value=g_a * g_b)


def even_odd_batches(data: Dataset) -> tuple[Dataset, Dataset]:
    """Split an environment into the even/odd-index half batches."""
    n2 = data.n // 2
    a = Dataset(X=data.X[0 : 2 * n2 : 2], y=data.y[0 : 2 * n2 : 2], env_id=data.env_id)
    b = Dataset(X=data.X[1 : 2 * n2 : 2], y=data.y[1 : 2 * n2 : 2], env_id=data.env_id)
    return a, b


# --- optimization-landscape study ------------------------------------------

LANDSCAPE_VARIANTS = ("d_lin", "d_dist", "d_dist_ridged")


def landscape_penalty(c: float, sigma_sq: float, variant: str, ridge: float = 1.0) -> float:
    """One penalty evaluation at phi = Diag(1, c), w = (1, 0), population moments."""
    from .sem import example1_moments

    m = example1_moments(sigma_sq)
    phi = np.array([[1.0, 0.0], [0.0, float(c)]])
    w = np.array([1.0, 0.0])
    if variant == "d_lin":
        return d_lin(w, phi, m).value
    if variant == "d_dist":
        return d_dist(w, phi, m).value
    if variant == "d_dist_ridged":
        w_opt = _optimal_classifier_predictor_ridge(phi, m, ridge)
        return float(np.sum((w - w_opt) ** 2))
    raise ValueError(f"unknown landscape variant {variant!r}")


def landscape_sweep(sigma_sq: float, c_grid, which: str, ridge: float = 1.0) -> list[dict]:
    """Evaluate one invariance penalty over a grid of representation scalings.

    Returns rows of {c, penalty, variant, sigma_sq}; exact population
    moments, so d_lin reproduces its closed form to machine precision.
    """
    if which not in LANDSCAPE_VARIANTS:
        raise ValueError(f"unknown landscape variant {which!r}")
    rows = []
    for c in np.asarray(c_grid, dtype=DTYPE):
        if not np.isfinite(c):
            raise ValueError("c grid must be finite")
        rows.append(
            {
                "c": float(c),
                "penalty": landscape_penalty(float(c), sigma_sq, which, ridge),
                "variant": which,
                "sigma_sq": float(sigma_sq),
            }
        )
    return rows
