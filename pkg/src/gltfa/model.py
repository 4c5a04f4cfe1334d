"""Core state types for the sparse factor model and the CFA/EFA algebra.

The model is ``y_t = Lambda f_t + e_t`` with ``f_t ~ N(0, I)`` and diagonal
idiosyncratic covariance ``Sigma = diag(sigma2)``.  Columns of the binary
support matrix ``delta`` are classified by their number of nonzero entries:
active (>= 2), spurious (exactly 1) and zero.  A spurious column can be
folded into the idiosyncratic variance of its pivot row without changing
the implied covariance, which is the bridge between the confirmatory
(active columns only) and exploratory (all k columns) representations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "SparsityMatrix",
    "ShrinkageState",
    "PriorConfig",
    "ModelState",
    "classify_columns",
    "column_pivots",
    "implied_covariance",
    "expand_cfa_to_efa",
    "collapse_efa_to_cfa",
]

ACTIVE, SPURIOUS, ZERO = "active", "spurious", "zero"


class ModelError(ValueError):
    """Raised when a state or configuration violates a model invariant."""


@dataclass
class Dataset:
    """An m x T data matrix: m features observed at T time points."""

    y: np.ndarray
    feature_names: list[str]
    standardized: bool = False
    demeaned: bool = False

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 2:
            raise ModelError("data matrix must be 2-dimensional (m x T)")
        m, T = self.y.shape
        if m < 3:
            raise ModelError(f"need at least 3 features, got m={m}")
        if T < 2:
            raise ModelError(f"need at least 2 time points, got T={T}")
        if not np.all(np.isfinite(self.y)):
            raise ModelError("data matrix contains non-finite entries")
        if len(self.feature_names) != m:
            raise ModelError("feature_names length does not match row count")
        if self.standardized:
            mu = self.y.mean(axis=1)
            var = self.y.var(axis=1, ddof=1)
            if np.max(np.abs(mu)) > 1e-8 or np.max(np.abs(var - 1.0)) > 1e-8:
                raise ModelError("standardized flag set but rows are not standardized")

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]


def classify_columns(delta: np.ndarray):
    """Classify the columns of a binary matrix by their column sums.

    Returns ``(column_class, r, r_sp, j0)`` where ``column_class`` is a list
    of tags ('active'/'spurious'/'zero') and the counts satisfy
    ``r + r_sp + j0 == k``.
    """
    delta = np.asarray(delta)
    d = delta.sum(axis=0)
    classes = [ACTIVE if dj >= 2 else (SPURIOUS if dj == 1 else ZERO) for dj in d]
    r = sum(c == ACTIVE for c in classes)
    r_sp = sum(c == SPURIOUS for c in classes)
    return classes, r, r_sp, len(classes) - r - r_sp


def column_pivots(delta: np.ndarray) -> np.ndarray:
    """Row index of the first nonzero entry per column; -1 for zero columns."""
    delta = np.asarray(delta)
    m, k = delta.shape
    piv = np.full(k, -1, dtype=np.int64)
    for j in range(k):
        nz = np.flatnonzero(delta[:, j])
        if nz.size:
            piv[j] = nz[0]
    return piv


@dataclass
class SparsityMatrix:
    """Binary m x k support matrix with pivot bookkeeping.

    The pivot of a nonzero column is the row of its top nonzero entry; an
    unordered GLT structure requires all pivots of nonzero columns to be
    pairwise distinct.
    """

    delta: np.ndarray
    column_class: list[str] = field(init=False)
    pivots: np.ndarray = field(init=False)
    r: int = field(init=False)
    r_sp: int = field(init=False)
    j0: int = field(init=False)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int8)
        if self.delta.ndim != 2:
            raise ModelError("delta must be an m x k matrix")
        if not np.isin(self.delta, (0, 1)).all():
            raise ModelError("delta must be binary")
        self.column_class, self.r, self.r_sp, self.j0 = classify_columns(self.delta)
        self.pivots = column_pivots(self.delta)
        nz = self.pivots[self.pivots >= 0]
        if nz.size != np.unique(nz).size:
            raise ModelError("pivots of nonzero columns must lie in different rows")

    @property
    def m(self) -> int:
        return self.delta.shape[0]

    @property
    def k(self) -> int:
        return self.delta.shape[1]

    def active_columns(self) -> np.ndarray:
        return np.flatnonzero([c == ACTIVE for c in self.column_class])

    def spurious_columns(self) -> np.ndarray:
        return np.flatnonzero([c == SPURIOUS for c in self.column_class])


@dataclass
class ShrinkageState:
    """Column, local and global scale parameters of the hierarchical slab.

    ``aux_*`` hold the Gamma auxiliaries of the F-distribution scale-mixture
    representation; they are present only for F-distributed components.
    """

    theta: np.ndarray
    kappa: float
    omega: Optional[np.ndarray] = None
    aux_b_theta: Optional[np.ndarray] = None
    aux_b_omega: Optional[np.ndarray] = None
    aux_b_kappa: Optional[float] = None

    def copy(self) -> "ShrinkageState":
        return ShrinkageState(
            theta=self.theta.copy(),
            kappa=self.kappa,
            omega=None if self.omega is None else self.omega.copy(),
            aux_b_theta=None if self.aux_b_theta is None else self.aux_b_theta.copy(),
            aux_b_omega=None if self.aux_b_omega is None else self.aux_b_omega.copy(),
            aux_b_kappa=self.aux_b_kappa,
        )


# Allowed values for the categorical switches in PriorConfig.
ESP_FAMILIES = ("1PB", "2PB")
SLAB_FAMILIES = ("gaussian_fixed", "gaussian_column", "gaussian_triple", "fractional")
SCALE_FAMILIES = ("invgamma", "F")
IDIO_MODES = ("fixed", "heywood")
BOOST_MODES = ("none", "asis", "mda", "column")

_ESP_ALIASES = {"onepb": "1PB", "1pb": "1PB", "twopb": "2PB", "2pb": "2PB"}


@dataclass
class PriorConfig:
    """Every prior family switch and hyperparameter of the model.

    Shape/rate pairs follow the (shape, rate) convention for Gamma priors
    and (shape, scale) for inverse-Gamma priors.  F-distributed scales use
    the (a, c) parameterization of F(2a, 2c).
    """

    # slab-probability process: tau_j ~ Beta(a_k, b_k) with
    # 1PB: a_k = alpha/k, b_k = 1;  2PB: a_k = alpha*gamma/k, b_k = gamma
    esp_family: str = "2PB"
    a_alpha: float = 6.0
    b_alpha: float = 3.0
    a_gamma: float = 6.0
    b_gamma: float = 6.0

    # slab distribution of the nonzero loadings
    slab_family: str = "fractional"
    A0: float = 1.0
    theta_family: str = "F"
    a_theta: float = 2.5
    c_theta: float = 2.5
    b_theta: float = 1.0
    a_omega: float = 0.2
    c_omega: float = 0.2
    kappa_family: str = "invgamma"
    a_kappa: float = 2.5
    c_kappa: float = 10.0
    b_kappa: float = 50.0
    b_frac: Optional[float] = None  # fractional exponent; None -> 1/(m*T)

    # idiosyncratic variances sigma2_i ~ InvGamma(c0, C_i0)
    c0: float = 2.5
    idio_mode: str = "heywood"
    C0: float = 1.0
    nu_o: float = 3.0
    s_o: float = 1.0

    # move tuning
    p_s: float = 0.5
    p_shift: float = 1.0 / 3.0
    p_switch: float = 1.0 / 3.0
    p_a: float = 0.5
    rw_sd_alpha: float = 0.25
    rw_sd_gamma: float = 0.25

    # mixing boost: None resolves per slab family at validate()
    boosting: Optional[str] = None
    asis_anchor: str = "max"  # or "pivot"
    mda_nu: float = 1.5
    mda_q: float = 1.5

    def validate(self) -> "PriorConfig":
        """Normalize aliases, resolve defaults and check ranges in place."""
        self.esp_family = _ESP_ALIASES.get(self.esp_family.lower(), self.esp_family)
        if self.esp_family not in ESP_FAMILIES:
            raise ModelError(f"unknown esp_family {self.esp_family!r}")
        if self.slab_family not in SLAB_FAMILIES:
            raise ModelError(f"unknown slab_family {self.slab_family!r}")
        if self.theta_family not in SCALE_FAMILIES:
            raise ModelError(f"unknown theta_family {self.theta_family!r}")
        if self.kappa_family not in SCALE_FAMILIES:
            raise ModelError(f"unknown kappa_family {self.kappa_family!r}")
        if self.idio_mode not in IDIO_MODES:
            raise ModelError(f"unknown idio_mode {self.idio_mode!r}")
        for name in ("a_alpha", "b_alpha", "a_gamma", "b_gamma", "A0", "a_theta",
                     "c_theta", "b_theta", "a_omega", "c_omega", "a_kappa",
                     "c_kappa", "b_kappa", "c0", "C0", "nu_o", "s_o",
                     "rw_sd_alpha", "rw_sd_gamma", "mda_nu", "mda_q"):
            if getattr(self, name) <= 0:
                raise ModelError(f"prior parameter {name} must be > 0")
        if self.b_frac is not None and not 0 < self.b_frac < 1:
            raise ModelError("fractional exponent must lie in (0, 1)")
        if not 0 < self.p_s <= 0.5:
            raise ModelError("p_s must lie in (0, 0.5]")
        if not 0 < self.p_a < 1:
            raise ModelError("p_a must lie in (0, 1)")
        if not (0 < self.p_shift and 0 < self.p_switch and self.p_shift + self.p_switch < 1):
            raise ModelError("need p_shift > 0, p_switch > 0 and p_shift + p_switch < 1")
        if self.boosting is None:
            self.boosting = {
                "fractional": "asis",
                "gaussian_column": "column",
                "gaussian_triple": "column",
                "gaussian_fixed": "none",
            }[self.slab_family]
        if self.boosting not in BOOST_MODES:
            raise ModelError(f"unknown boosting mode {self.boosting!r}")
        if self.boosting in ("asis", "mda") and self.slab_family != "fractional":
            raise ModelError(f"{self.boosting} boosting requires the fractional slab")
        if self.boosting == "column" and self.slab_family not in ("gaussian_column", "gaussian_triple"):
            raise ModelError("column boosting requires a column-shrinkage slab")
        if self.asis_anchor not in ("max", "pivot"):
            raise ModelError("asis_anchor must be 'max' or 'pivot'")
        return self

    @property
    def hierarchical(self) -> bool:
        return self.slab_family != "fractional"

    @property
    def has_shrinkage(self) -> bool:
        return self.slab_family in ("gaussian_column", "gaussian_triple")

    def esp_beta_params(self, alpha: float, gamma: float, k: int) -> tuple[float, float]:
        """(a_k, b_k) of the per-column Beta slab-probability prior."""
        if self.esp_family == "1PB":
            return alpha / k, 1.0
        return alpha * gamma / k, gamma

    def fractional_b(self, m: int, T: int) -> float:
        return self.b_frac if self.b_frac is not None else 1.0 / (m * T)


@dataclass
class ModelState:
    """One full sampler state in the confirmatory representation.

    Arrays are allocated at the maximum width k; the first ``r`` columns
    (in arbitrary storage order) are the active ones, everything beyond is
    structurally zero.  ``r_sp`` counts spurious columns, whose positions
    are not part of the state.
    """

    delta: np.ndarray          # (m, k) int8, columns [0, r) active
    lam: np.ndarray            # (m, k) loadings, zero off the delta support
    sigma2: np.ndarray         # (m,) idiosyncratic variances
    factors: np.ndarray        # (k, T), rows [0, r) in use
    tau: np.ndarray            # (k,), entries [0, r) in use
    alpha: float
    gamma: float
    r: int
    r_sp: int
    shrink: Optional[ShrinkageState] = None

    @property
    def m(self) -> int:
        return self.delta.shape[0]

    @property
    def k(self) -> int:
        return self.delta.shape[1]

    @property
    def T(self) -> int:
        return self.factors.shape[1]

    @property
    def j0(self) -> int:
        return self.k - self.r - self.r_sp

    def copy(self) -> "ModelState":
        return ModelState(
            delta=self.delta.copy(), lam=self.lam.copy(), sigma2=self.sigma2.copy(),
            factors=self.factors.copy(), tau=self.tau.copy(), alpha=self.alpha,
            gamma=self.gamma, r=self.r, r_sp=self.r_sp,
            shrink=None if self.shrink is None else self.shrink.copy(),
        )

    def active_pivots(self) -> np.ndarray:
        return column_pivots(self.delta[:, :self.r])

    def check(self):
        """Assert the structural invariants; raises ModelError on violation."""
        if not np.all(np.isfinite(self.lam)) or not np.all(np.isfinite(self.sigma2)):
            raise ModelError("non-finite loadings or variances")
        if np.any(self.sigma2 <= 0):
            raise ModelError("idiosyncratic variances must be strictly positive")
        if np.any((self.lam != 0) & (self.delta == 0)):
            raise ModelError("nonzero loading outside the delta support")
        if np.any(self.delta[:, self.r:]):
            raise ModelError("columns beyond r must be structurally zero")
        d = self.delta[:, :self.r].sum(axis=0)
        if self.r and np.any(d < 2):
            raise ModelError("active columns must have at least two nonzero entries")
        piv = self.active_pivots()
        if piv.size != np.unique(piv).size:
            raise ModelError("active pivots must be pairwise distinct")
        if self.r and not (np.all(self.tau[:self.r] > 0) and np.all(self.tau[:self.r] < 1)):
            raise ModelError("slab probabilities must lie in (0, 1)")
        if self.r + self.r_sp > self.k:
            raise ModelError("r + r_sp exceeds k")


def _check_finite_state(state: ModelState):
    if not (np.all(np.isfinite(state.lam)) and np.all(np.isfinite(state.sigma2))):
        raise ModelError("state contains non-finite entries")


def implied_covariance(state: ModelState, which: str = "cfa") -> np.ndarray:
    """Marginal covariance Lambda Lambda' + Sigma of the observations.

    ``which='efa'`` uses all k stored columns; ``which='cfa'`` uses the
    active columns only (spurious mass already lives in sigma2 in the
    confirmatory representation, so both agree on a collapsed state).
    The result must be symmetric positive definite.
    """
    _check_finite_state(state)
    if which == "efa":
        omega = state.lam @ state.lam.T + np.diag(state.sigma2)
    elif which == "cfa":
        lam = state.lam[:, :state.r]
        # materialized spurious columns fold back into the variances
        sig = np.diag(state.sigma2).copy()
        for col in range(state.r, state.k):
            nz = np.flatnonzero(state.delta[:, col])
            for i in nz:
                sig[i, i] += state.lam[i, col] ** 2
        omega = lam @ lam.T + sig
    else:
        raise ModelError(f"which must be 'efa' or 'cfa', got {which!r}")
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise ModelError("implied covariance is not positive definite") from None
    return omega


def expand_cfa_to_efa(state: ModelState, pivots_sp: Sequence[int],
                      xis: Sequence[float]) -> ModelState:
    """Materialize spurious columns, splitting idiosyncratic variance.

    Each spurious column gets a single loading ``xi`` in its pivot row
    ``l_sp`` and the corresponding ``sigma2[l_sp]`` is reduced by ``xi**2``.
    The implied covariance is unchanged.  Pivot rows must be distinct and
    disjoint from the active pivots, and each ``xi**2 < sigma2[l_sp]``.
    """
    pivots_sp = list(pivots_sp)
    xis = list(xis)
    if len(pivots_sp) != state.r_sp or len(xis) != state.r_sp:
        raise ModelError("need one pivot and one loading per spurious column")
    if len(set(pivots_sp)) != len(pivots_sp):
        raise ModelError("spurious pivots must be distinct")
    active = set(state.active_pivots().tolist())
    new = state.copy()
    for s, (l_sp, xi) in enumerate(zip(pivots_sp, xis)):
        if l_sp in active:
            raise ModelError(f"spurious pivot {l_sp} collides with an active pivot")
        if xi * xi >= state.sigma2[l_sp]:
            raise ModelError(
                f"spurious loading at row {l_sp} exceeds the idiosyncratic "
                f"variance ({xi**2:.6g} >= {state.sigma2[l_sp]:.6g})")
        col = state.r + s
        new.delta[l_sp, col] = 1
        new.lam[l_sp, col] = xi
        new.sigma2[l_sp] = new.sigma2[l_sp] - xi * xi
    return new


def collapse_efa_to_cfa(state: ModelState) -> ModelState:
    """Fold materialized spurious columns back into the variances."""
    new = state.copy()
    for col in range(state.r, state.r + state.r_sp):
        nz = np.flatnonzero(new.delta[:, col])
        if nz.size != 1:
            raise ModelError(f"column {col} is not spurious (has {nz.size} nonzeros)")
        l_sp = nz[0]
        new.sigma2[l_sp] += new.lam[l_sp, col] ** 2
        new.lam[l_sp, col] = 0.0
        new.delta[l_sp, col] = 0
    return new
