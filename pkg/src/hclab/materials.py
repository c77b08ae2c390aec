"""Elastic densities, hardening on the compact set K, and the assumption audit.

The density library covers the cases the theory distinguishes:

* stiff matrix      W1(F) = |F|^2 + gamma |F - I|^2   (2-coercive, quadratic)
* soft, convex      W0_eps(F) = (1 + eps) |F|^2       (limit |F|^2; the
  quasiconvexified cell value at F = 0 vanishes, so the soft phase only
  contributes hardening to the homogenized energy)
* soft, two-well    W0_eps(F) = (1+eps) [ min(|F-A|^2, |F+A|^2) + delta |F|^2 ]
  with a rank-one A, the nonconvex option whose cell value is a genuine
  relaxation.

Hardening is a single function for both phases, finite exactly on
K = { exp(M) : tr M = 0, |M| <= r_K }:  H(P) = h0 + h1 |log P|^2.

Densities evaluate on stacked arrays of matrices; every value is a plain
float array so the audit and the assembly share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from hclab import slgeometry


class MaterialError(ValueError):
    pass


class NotUnimodular(MaterialError):
    """det P violates the unimodularity tolerance (1e-9)."""


def _fro2(F: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...ij->...", F, F)


class StiffDensity:
    """W1(F) = |F|^2 + gamma |F - I|^2."""

    is_quadratic = True

    def __init__(self, gamma: float = 1.0):
        self.gamma = float(gamma)

    def value(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        eye = np.eye(F.shape[-1])
        return _fro2(F) + self.gamma * _fro2(F - eye)

    def grad(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        return 2.0 * F + 2.0 * self.gamma * (F - np.eye(F.shape[-1]))

    def isotropic_quad_parts(self, dim: int):
        """(a, L, c) with W(F) = a |F|^2 + L : F + c."""
        return 1.0 + self.gamma, -2.0 * self.gamma * np.eye(dim), self.gamma * dim


class SoftConvexFamily:
    """W0_eps(F) = (1 + eps) |F|^2, pointwise limit |F|^2."""

    is_quadratic = True
    is_convex = True

    def value(self, eps: float, F: np.ndarray) -> np.ndarray:
        return (1.0 + eps) * _fro2(np.asarray(F, dtype=float))

    def grad(self, eps: float, F: np.ndarray) -> np.ndarray:
        return 2.0 * (1.0 + eps) * np.asarray(F, dtype=float)

    def isotropic_quad_parts(self, eps: float, dim: int):
        return 1.0 + eps, np.zeros((dim, dim)), 0.0

    def limit(self):
        return FrozenSoft(self, 0.0)


class SoftTwoWellFamily:
    """Two-well option: wells at +-A (rank one) plus a small convex stabilizer.

    The crease of the min is resolved deterministically toward the first
    branch (the -A well) so descent sees a consistent subgradient.
    """

    is_quadratic = False
    is_convex = False

    def __init__(self, dim: int = 2, amplitude: float = 0.8, delta: float = 0.1):
        A = np.zeros((dim, dim))
        A[0, 0] = amplitude
        self.A = A
        self.delta = float(delta)

    def value(self, eps: float, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        wells = np.minimum(_fro2(F - self.A), _fro2(F + self.A))
        return (1.0 + eps) * (wells + self.delta * _fro2(F))

    def grad(self, eps: float, F: np.ndarray, return_crease: bool = False):
        F = np.asarray(F, dtype=float)
        lo = _fro2(F - self.A)
        hi = _fro2(F + self.A)
        first = lo <= hi
        branch = np.where(first[..., None, None], F - self.A, F + self.A)
        g = (1.0 + eps) * (2.0 * branch + 2.0 * self.delta * F)
        if return_crease:
            return g, int(np.count_nonzero(np.abs(lo - hi) < 1e-12))
        return g

    def limit(self):
        return FrozenSoft(self, 0.0)


class FrozenSoft:
    """A soft family evaluated at a fixed family parameter (usually the eps -> 0 limit)."""

    def __init__(self, family, eps: float):
        self.family = family
        self.eps = float(eps)
        self.is_quadratic = family.is_quadratic

    def value(self, F: np.ndarray) -> np.ndarray:
        return self.family.value(self.eps, F)

    def grad(self, F: np.ndarray, **kw):
        return self.family.grad(self.eps, F, **kw) if kw else self.family.grad(self.eps, F)

    def isotropic_quad_parts(self, dim: int):
        return self.family.isotropic_quad_parts(self.eps, dim)


@dataclass
class MaterialModel:
    """Bundle of densities, hardening data, and the claimed growth constants.

    Immutable in use; density evaluation is pure, so the model can be shared
    freely across workers.
    """

    dim: int
    W_stiff: StiffDensity
    W_soft_family: object
    hardening_params: tuple
    K_radius: float
    q: float
    growth_constants: tuple
    finsler: slgeometry.FinslerStructure = field(default_factory=slgeometry.default_finsler)

    def __post_init__(self):
        c1, c2, c3 = self.growth_constants
        if not (0 < c1 <= c2) or c3 <= 0:
            raise MaterialError(f"growth constants must satisfy 0 < c1 <= c2, c3 > 0, got {self.growth_constants}")
        if self.q <= self.dim:
            raise MaterialError(f"plastic-gradient exponent must exceed the dimension (Morrey): q={self.q}, d={self.dim}")
        if self.K_radius <= 0:
            raise MaterialError("K_radius must be positive")

    @property
    def W_soft_limit(self) -> FrozenSoft:
        return self.W_soft_family.limit()

    @property
    def h0(self) -> float:
        return self.hardening_params[0]

    @property
    def h1(self) -> float:
        return self.hardening_params[1]

    def hardening_smooth(self, P: np.ndarray) -> np.ndarray:
        """h0 + h1 |log P|^2 without the K indicator (assembly path: fields
        are confined to K by construction, so the indicator never fires)."""
        logs = slgeometry.log_batch(np.asarray(P, dtype=float))
        return self.h0 + self.h1 * _fro2(logs)

    def hardening_grad(self, P: np.ndarray) -> np.ndarray:
        """d/dP of the smooth hardening: 2 h1 (Dlog_P)^*(log P)."""
        P = np.asarray(P, dtype=float)
        logs = slgeometry.log_batch(P)
        return 2.0 * self.h1 * slgeometry.log_frechet_adjoint(P, logs)


def default_material(
    dim: int = 2,
    gamma: float = 1.0,
    soft: str = "convex",
    h0: float = 0.1,
    h1: float = 5.0,
    r_K: float = 0.3,
    q: float = 4.0,
    twowell_amplitude: float = 0.8,
    twowell_delta: float = 0.1,
) -> MaterialModel:
    """Stock model with growth constants valid for the defaults in d = 2."""
    if soft == "convex":
        soft_family = SoftConvexFamily()
        c1 = 1.0
    elif soft == "twowell":
        soft_family = SoftTwoWellFamily(dim=dim, amplitude=twowell_amplitude, delta=twowell_delta)
        c1 = min(1.0, twowell_delta)
    else:
        raise MaterialError(f"unknown soft density {soft!r}")
    c2 = max(2.0 * gamma + 2.0, 2.0 + 4.0 * twowell_amplitude**2 if soft == "twowell" else 0.0)
    c3 = 2.0 * (1.0 + gamma) + 2.0 * gamma * math.sqrt(dim) + 8.0 * twowell_amplitude
    return MaterialModel(
        dim=dim,
        W_stiff=StiffDensity(gamma),
        W_soft_family=soft_family,
        hardening_params=(h0, h1),
        K_radius=r_K,
        q=q,
        growth_constants=(c1, c2, c3),
    )


def eval_density(model: MaterialModel, phase: str, eps: float, F) -> float:
    """Evaluate the phase density at one matrix; eps is ignored for the stiff phase."""
    F = np.asarray(F, dtype=float)
    if phase == "stiff":
        return float(model.W_stiff.value(F))
    if phase == "soft":
        return float(model.W_soft_family.value(eps, F))
    raise MaterialError(f"phase must be 'soft' or 'stiff', got {phase!r}")


def eval_hardening(model: MaterialModel, P) -> float:
    """H(P) = h0 + h1 |log P|^2 on K, +inf outside; det P must be 1 to 1e-9."""
    P = np.asarray(P, dtype=float)
    det = float(np.linalg.det(P))
    if abs(det - 1.0) > 1e-9:
        raise NotUnimodular(f"det P = {det!r} is not 1 within 1e-9")
    logs = slgeometry.log_batch(P)
    norm = float(np.linalg.norm(logs))
    if norm > model.K_radius + 1e-12:
        return math.inf
    return float(model.h0 + model.h1 * norm**2)


@dataclass(frozen=True)
class AssumptionReport:
    """Worst-case violation margins of the standing assumptions; >= 0 means pass."""

    margins: dict
    sample_count: int
    seed: int
    measured_cK: float

    @property
    def is_pass(self) -> bool:
        return all(v >= 0.0 for v in self.margins.values())


def _sample_matrices(rng, count, dim, radius):
    """Matrices with Frobenius norm <= radius, plus 0 and I as canonical points."""
    raw = rng.standard_normal((count, dim, dim))
    norms = np.linalg.norm(raw, axis=(-2, -1), keepdims=True)
    radii = radius * rng.random((count, 1, 1)) ** (1.0 / dim**2)
    out = raw / np.maximum(norms, 1e-30) * radii
    out[0] = 0.0
    if count > 1:
        out[1] = np.eye(dim)
    return out


def audit_assumptions(model: MaterialModel, sample_count: int = 10_000, seed: int = 0) -> AssumptionReport:
    """Sample-based audit of the growth, Lipschitz, convergence, compactness,
    and generator assumptions, with the model's claimed constants.

    Failures never raise; they show up as negative margins.  The report is a
    deterministic function of (model, sample_count, seed).
    """
    if sample_count < 1:
        raise MaterialError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    d = model.dim
    c1, c2, c3 = model.growth_constants
    eps_probe = (1e-1, 1e-2, 1e-3)
    F = _sample_matrices(rng, sample_count, d, radius=10.0)
    F2 = _sample_matrices(rng, sample_count, d, radius=10.0)
    margins: dict = {}

    def growth_margins(values, mats):
        n2 = _fro2(mats)
        return float(np.min(values - c1 * n2)), float(np.min(c2 * (n2 + 1.0) - values))

    def lipschitz_margin(va, vb):
        bound = c3 * (1.0 + np.linalg.norm(F, axis=(-2, -1)) + np.linalg.norm(F2, axis=(-2, -1)))
        return float(np.min(bound * np.linalg.norm(F - F2, axis=(-2, -1)) - np.abs(va - vb)))

    w1a, w1b = model.W_stiff.value(F), model.W_stiff.value(F2)
    margins["E1_lower"], margins["E1_upper"] = growth_margins(w1a, F)
    margins["E2_lipschitz"] = lipschitz_margin(w1a, w1b)

    lo3 = up3 = lip4 = math.inf
    for eps in eps_probe:
        va, vb = model.W_soft_family.value(eps, F), model.W_soft_family.value(eps, F2)
        a, b = growth_margins(va, F)
        lo3, up3 = min(lo3, a), min(up3, b)
        lip4 = min(lip4, lipschitz_margin(va, vb))
    margins["E3_lower"], margins["E3_upper"] = lo3, up3
    margins["E4_lipschitz"] = lip4

    limit = model.W_soft_limit.value(F)
    scale = 1.0 + _fro2(F)
    devs = [float(np.max(np.abs(model.W_soft_family.value(eps, F) - limit) / scale)) for eps in eps_probe]
    margins["E5_monotone"] = min(devs[i] - devs[i + 1] for i in range(len(devs) - 1))
    # convergence rate check: the final deviation must have shrunk at least
    # one tenth as fast as the eps ratio suggests (constant families pass at 0)
    if devs[0] == 0.0:
        margins["E5_final"] = 0.0
    else:
        margins["E5_final"] = 10.0 * devs[0] * (eps_probe[-1] / eps_probe[0]) - devs[-1]

    # Compact set K: measured c_K on boundary and interior samples, against the
    # analytic bound 2 sqrt(d) e^{r_K}, and the chain |G| <= c_K |G F^{-1}|.
    k_count = max(64, sample_count // 10)
    coeffs = rng.standard_normal((k_count, d * d - 1))
    coeffs /= np.linalg.norm(coeffs, axis=1, keepdims=True)
    radii = model.K_radius * np.concatenate([np.ones(k_count // 2), rng.random(k_count - k_count // 2)])
    Pk = slgeometry.exp_batch(slgeometry.coeffs_to_matrices(coeffs * radii[:, None], d))
    cK = float(np.max(np.linalg.norm(Pk, axis=(-2, -1)) + np.linalg.norm(np.linalg.inv(Pk), axis=(-2, -1))))
    margins["Pbound_analytic"] = 2.0 * math.sqrt(d) * math.exp(model.K_radius) - cK
    G = _sample_matrices(rng, k_count, d, radius=5.0)
    chain = cK * np.linalg.norm(G @ np.linalg.inv(Pk), axis=(-2, -1)) - np.linalg.norm(G, axis=(-2, -1))
    margins["Pbound_chain"] = float(np.min(chain))

    # Hardening: H finite exactly on K, Lipschitz on K with the analytic bound
    # 2 h1 r_K L_log, L_log estimated from sampled difference quotients.
    idx = rng.permutation(k_count)
    P1m, P2m = Pk, Pk[idx]
    H1 = model.h0 + model.h1 * _fro2(slgeometry.log_batch(P1m))
    H2 = model.h0 + model.h1 * _fro2(slgeometry.log_batch(P2m))
    diffP = np.linalg.norm(P1m - P2m, axis=(-2, -1))
    keep = diffP > 1e-12
    quot = np.linalg.norm(slgeometry.log_batch(P1m) - slgeometry.log_batch(P2m), axis=(-2, -1))[keep] / diffP[keep]
    L_log = float(np.max(quot)) * 1.05 if keep.any() else 1.0
    bound = 2.0 * model.h1 * model.K_radius * L_log
    margins["H2_lipschitz"] = float(np.min(bound * diffP[keep] - np.abs(H1 - H2)[keep])) if keep.any() else 0.0

    # Finsler generator: positive 1-homogeneity and the coercivity sandwich.
    Msl = slgeometry.coeffs_to_matrices(rng.standard_normal((k_count, d * d - 1)), d)
    scals = 0.5 + 2.0 * rng.random(k_count)
    dI = model.finsler.delta_I(Msl)
    hom_dev = np.abs(model.finsler.delta_I(scals[:, None, None] * Msl) - scals * dI)
    margins["D1_homogeneous"] = float(1e-9 * np.max(1.0 + dI) - np.max(hom_dev))
    normM = np.linalg.norm(Msl, axis=(-2, -1))
    margins["D2_lower"] = float(np.min(dI - model.finsler.c4 * normM) + 1e-12)
    margins["D2_upper"] = float(np.min(model.finsler.c5 * normM - dI) + 1e-12)

    return AssumptionReport(margins=margins, sample_count=sample_count, seed=seed, measured_cK=cK)
