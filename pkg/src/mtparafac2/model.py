"""PARAFAC2 factor model, reconstruction losses and block gradients.

Slice k is modelled as ``X_k ~ U_k diag(s_k) V^T`` where ``U_k`` is a free
matrix tied to ``Q_k H`` through a quadratic coupling penalty and
``Q_k^T Q_k ~ I`` through an orthogonality penalty.

All gradient functions take the tensor the loss is evaluated on. During
training that is the current mini-batch, so the reconstruction term is the
mean squared error over the batch's observed entries and the prediction
terms are means over the batch's labelled slices.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError

TENSOR_TASK = "tensor"


@dataclass
class FactorModel:
    Q: list
    H: np.ndarray
    s: list
    V: np.ndarray
    U: list = field(default=None)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.Q = [np.asarray(q, dtype=np.float64) for q in self.Q]
        self.s = [np.asarray(v, dtype=np.float64) for v in self.s]
        if self.U is None:
            self.U = [q @ self.H for q in self.Q]
        else:
            self.U = [np.asarray(u, dtype=np.float64) for u in self.U]
        R = self.H.shape[0]
        if self.H.shape != (R, R) or self.V.shape[1] != R:
            raise ShapeError(f"inconsistent rank: H {self.H.shape}, V {self.V.shape}")
        if not (len(self.Q) == len(self.s) == len(self.U)):
            raise ShapeError("Q, s and U must have one entry per slice")
        for q, u, v in zip(self.Q, self.U, self.s):
            if q.shape[1] != R or u.shape != q.shape or v.shape != (R,):
                raise ShapeError("per-slice factor shapes disagree with rank")

    @property
    def R(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return len(self.Q)

    def copy(self) -> "FactorModel":
        return copy.deepcopy(self)

    def subset(self, indices) -> "FactorModel":
        """View on a subset of slices; arrays are shared, not copied."""
        new = object.__new__(FactorModel)
        new.Q = [self.Q[i] for i in indices]
        new.s = [self.s[i] for i in indices]
        new.U = [self.U[i] for i in indices]
        new.H = self.H
        new.V = self.V
        return new

    def export(self) -> "FactorModel":
        """Set every ``U_k`` to ``Q_k H`` (in place) and return self."""
        self.U = [q @ self.H for q in self.Q]
        return self

    def orthogonality_gap(self) -> float:
        """Largest ``||Q_k^T Q_k - I||_F`` over slices."""
        eye = np.eye(self.R)
        return max(float(np.linalg.norm(q.T @ q - eye)) for q in self.Q)

    def check_against(self, tensor) -> None:
        if tensor.K != self.K:
            raise ShapeError(f"model has {self.K} slices, tensor has {tensor.K}")
        if tensor.J != self.V.shape[0]:
            raise ShapeError(f"model has J={self.V.shape[0]}, tensor has J={tensor.J}")
        for k, (x, u) in enumerate(zip(tensor.slices, self.U)):
            if x.shape[0] != u.shape[0]:
                raise ShapeError(f"slice {tensor.slice_ids[k]!r}: I_k mismatch")


@dataclass
class PenaltyConfig:
    """Loss weights and step size for one training run."""

    rho_tensor: float = 1.0
    rho_static: float = 1.0
    rho_dynamic: float = 1.0
    varrho1: float = 1.0
    varrho2: float = 1.0
    c2: float = 0.0
    step_size: float = 1e-2

    def validate(self):
        for name in ("rho_tensor", "rho_static", "rho_dynamic", "varrho1", "varrho2", "c2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative number, got {v}")
        if not np.isfinite(self.step_size) or self.step_size < 0:
            raise ConfigError(f"step_size must be nonnegative, got {self.step_size}")


def _weight(weights, key, default):
    if weights is None:
        return default
    return weights.get(key, default)


def _check_index(m, k):
    if not 0 <= k < m.K:
        raise IndexError(f"slice index {k} out of range for K={m.K}")


def reconstruct_slice(m: FactorModel, k: int) -> np.ndarray:
    """``U_k diag(s_k) V^T`` using the free ``U_k``."""
    _check_index(m, k)
    return (m.U[k] * m.s[k]) @ m.V.T


def masked_residual(t, m, k) -> np.ndarray:
    """``M_k * (recon_k - X_k)``."""
    return t.masks[k] * (reconstruct_slice(m, k) - t.slices[k])


def masked_l2_loss(t, m: FactorModel) -> float:
    """Mean squared reconstruction error over observed entries."""
    n_obs = t.n_observed
    if n_obs == 0:
        raise DegenerateInputError("no observed entries")
    total = 0.0
    for k in range(t.K):
        total += float(np.sum(masked_residual(t, m, k) ** 2))
    return total / n_obs


def fit_score(t, m: FactorModel, use_free_u: bool = False) -> float:
    """FIT = 1 - ||X - recon||^2 / ||X||^2 on observed entries.

    Evaluated with ``U_k = Q_k H`` unless ``use_free_u`` is set.
    """
    num = den = 0.0
    for k in range(t.K):
        u = m.U[k] if use_free_u else m.Q[k] @ m.H
        r = t.masks[k] * ((u * m.s[k]) @ m.V.T - t.slices[k])
        num += float(np.sum(r**2))
        den += float(np.sum((t.masks[k] * t.slices[k]) ** 2))
    if den == 0.0:
        raise DegenerateInputError("observed tensor entries are all zero")
    return 1.0 - num / den


def _n_obs(t):
    n = t.n_observed
    if n == 0:
        raise DegenerateInputError("no observed entries")
    return n


def grad_U(t, m, k, penalties: PenaltyConfig, heads=None, weights=None, n_obs=None):
    """Gradient of the U_k subproblem.

    ``rho1 * mse + varrho1 ||U_k - Q_k H||^2 + sum_d rho_d L_d(U_k) / K_d``
    where ``K_d`` counts the slices of ``t`` labelled for dynamic task d.
    """
    _check_index(m, k)
    n_obs = n_obs or _n_obs(t)
    rho1 = _weight(weights, TENSOR_TASK, penalties.rho_tensor)
    g = (2.0 * rho1 / n_obs) * (masked_residual(t, m, k) @ m.V) * m.s[k]
    g += 2.0 * penalties.varrho1 * (m.U[k] - m.Q[k] @ m.H)
    if heads is not None:
        g += heads.dynamic_input_grad(t, m.U[k], k, penalties, weights)
    return g


def grad_Q(m, k, penalties: PenaltyConfig):
    """Gradient of ``varrho1 ||U_k - Q_k H||^2 + varrho2 ||Q_k^T Q_k - I||^2``."""
    _check_index(m, k)
    q = m.Q[k]
    gap = m.U[k] - q @ m.H
    g = -2.0 * penalties.varrho1 * gap @ m.H.T
    if penalties.varrho2:
        g += 4.0 * penalties.varrho2 * q @ (q.T @ q - np.eye(m.R))
    return g


def grad_H(m):
    """Gradient of ``sum_k ||U_k - Q_k H||^2`` with respect to H."""
    g = np.zeros_like(m.H)
    for q, u in zip(m.Q, m.U):
        g -= 2.0 * q.T @ (u - q @ m.H)
    return g


def grad_S(t, m, k, penalties: PenaltyConfig, heads=None, weights=None, n_obs=None):
    """Gradient of ``rho1 * mse + sum_n rho_n L_n(s_k) / K_n`` w.r.t. s_k."""
    _check_index(m, k)
    n_obs = n_obs or _n_obs(t)
    rho1 = _weight(weights, TENSOR_TASK, penalties.rho_tensor)
    e = masked_residual(t, m, k)
    g = (2.0 * rho1 / n_obs) * np.einsum("ir,ij,jr->r", m.U[k], e, m.V)
    if heads is not None:
        g += heads.static_input_grad(t, m.s[k], k, penalties, weights)
    return g


def grad_V(t, m, penalties: PenaltyConfig, weights=None, n_obs=None):
    """Gradient of the smooth part ``rho1 * mse`` w.r.t. V."""
    n_obs = n_obs or _n_obs(t)
    rho1 = _weight(weights, TENSOR_TASK, penalties.rho_tensor)
    g = np.zeros_like(m.V)
    for k in range(t.K):
        g += masked_residual(t, m, k).T @ (m.U[k] * m.s[k])
    return (2.0 * rho1 / n_obs) * g


def soft_threshold(x, eta):
    """Proximal operator of ``eta * ||x||_1``; ``eta`` may be elementwise."""
    if np.any(np.asarray(eta) < 0):
        raise ConfigError(f"threshold must be nonnegative, got {eta}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - eta, 0.0)


def nonneg_project(s):
    return np.maximum(np.asarray(s, dtype=np.float64), 0.0)


def penalty_terms(m, penalties: PenaltyConfig):
    """Coupling and orthogonality penalties summed over slices."""
    eye = np.eye(m.R)
    coupling = sum(float(np.sum((u - q @ m.H) ** 2)) for q, u in zip(m.Q, m.U))
    ortho = sum(float(np.sum((q.T @ q - eye) ** 2)) for q in m.Q)
    return penalties.varrho1 * coupling, penalties.varrho2 * ortho
