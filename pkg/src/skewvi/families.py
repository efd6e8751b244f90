"""The variational families: density, sampling, score in theta, and
parameter Jacobian-vector products for the skew graphical family in its
direct and centered parametrizations and its sinh-arcsinh copula extension.

Vector conventions: parameter fields are (p,) arrays; draws and density
arguments are (p,) for a single point or (p, m) for a batch of m points.
Densities return a scalar or an (m,) array accordingly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import skewnorm as sk
from .sparse_graph import SparsityPattern, UnitLowerSparse

LOG2 = np.log(2.0)
LOG2PI = np.log(2.0 * np.pi)


@dataclass
class NoiseDraw:
    """Standard normal base noise (u, v), each (p,) or (p, m)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same shape")

    @staticmethod
    def draw(rng: np.random.Generator, p: int, m=None) -> "NoiseDraw":
        shape = (p,) if m is None else (p, m)
        return NoiseDraw(rng.standard_normal(shape), rng.standard_normal(shape))


@dataclass
class DirectParams:
    """Direct parametrization: location mu, skewness alpha, log scale
    precisions log_kappa, unit-lower factor L."""

    mu: np.ndarray
    alpha: np.ndarray
    log_kappa: np.ndarray
    L: UnitLowerSparse

    def __post_init__(self):
        _check_param_vectors(self, ("mu", "alpha", "log_kappa"))

    @property
    def p(self) -> int:
        return self.L.p


@dataclass
class CenteredParams:
    """Centered parametrization: exact mean-location xi, skewness alpha,
    log scales log_nu, unit-lower factor L."""

    xi: np.ndarray
    alpha: np.ndarray
    log_nu: np.ndarray
    L: UnitLowerSparse

    def __post_init__(self):
        _check_param_vectors(self, ("xi", "alpha", "log_nu"))

    @property
    def p(self) -> int:
        return self.L.p


@dataclass
class CopulaParams:
    """Copula parametrization: location xi, log scales log_nu, skewness
    alpha, unit-lower factor L, and per-coordinate sinh-arcsinh transforms."""

    xi: np.ndarray
    log_nu: np.ndarray
    alpha: np.ndarray
    L: UnitLowerSparse
    gamma: sk.SasParams

    def __post_init__(self):
        _check_param_vectors(self, ("xi", "log_nu", "alpha"))
        if self.gamma.epsilon.shape != (self.p,) or self.gamma.log_delta.shape != (self.p,):
            raise ValueError("gamma arrays must have length p")

    @property
    def p(self) -> int:
        return self.L.p


def _check_param_vectors(params, names):
    p = params.L.p
    for name in names:
        arr = np.asarray(getattr(params, name), dtype=float)
        if arr.shape != (p,):
            raise ValueError(f"{name} must have shape ({p},), got {arr.shape}")
        setattr(params, name, arr)


def _col(a, ref):
    """Broadcast a (p,) parameter against (p,) or (p, m) data."""
    return a[:, None] if ref.ndim == 2 else a


def _gcol(g: sk.SasParams, ref) -> sk.SasParams:
    if ref.ndim == 2:
        return sk.SasParams(g.epsilon[:, None], g.log_delta[:, None])
    return g


def _check_theta(theta, p):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim not in (1, 2) or theta.shape[0] != p:
        raise ValueError(f"theta must have leading dimension {p}")
    return theta


# --- direct parametrization -------------------------------------------------

def sdgm_sample(params: DirectParams, noise: NoiseDraw) -> np.ndarray:
    u, v = noise.u, noise.v
    z = sk.sample_skew_normal(_col(params.alpha, u), u, v)
    x = _col(np.exp(-params.log_kappa), u) * z
    return _col(params.mu, u) + params.L.solve_lower_t(x)


def sdgm_log_density(params: DirectParams, theta) -> np.ndarray:
    theta = _check_theta(theta, params.p)
    kappa = np.exp(params.log_kappa)
    diff = theta - _col(params.mu, theta)
    s = params.L.matvec_t(diff)
    quad = np.sum((_col(kappa, s) * s) ** 2, axis=0)
    log_phi = -0.5 * params.p * LOG2PI + np.sum(params.log_kappa) - 0.5 * quad
    t = _col(kappa * params.alpha, s) * s
    log_cdf = np.sum(norm.logcdf(t), axis=0)
    return params.p * LOG2 + log_phi + log_cdf


def _mills(t):
    """phi(t) / Phi(t), stable in the left tail via log evaluation."""
    return np.exp(norm.logpdf(t) - norm.logcdf(t))


def sdgm_grad_theta(params: DirectParams, theta) -> np.ndarray:
    theta = _check_theta(theta, params.p)
    kappa = np.exp(params.log_kappa)
    diff = theta - _col(params.mu, theta)
    s = params.L.matvec_t(diff)
    gauss = -params.L.matvec(_col(kappa**2, s) * s)
    ka = kappa * params.alpha
    t = _col(ka, s) * s
    skew = params.L.matvec(_col(ka, s) * _mills(t))
    return gauss + skew


def sdgm_jvp(params: DirectParams, noise: NoiseDraw, z) -> dict:
    u, v = noise.u, noise.v
    z = _check_theta(z, params.p)
    alpha = _col(params.alpha, u)
    kinv = _col(np.exp(-params.log_kappa), u)
    c = params.L.solve_lower(z)
    d_alpha = kinv * (1.0 + alpha**2) ** (-1.5) * (np.abs(u) - alpha * v) * c
    x = kinv * sk.sample_skew_normal(alpha, u, v)
    d_log_kappa = -x * c
    a = params.L.solve_lower_t(x)
    pat = params.L.pattern
    d_L = -a[pat.rows] * c[pat.cols]
    return {"mu": z, "alpha": d_alpha, "log_kappa": d_log_kappa, "L": d_L}


# --- centered parametrization ----------------------------------------------

def params_center_to_direct(params: CenteredParams) -> DirectParams:
    """Exact bijection onto the direct parametrization."""
    nu = np.exp(params.log_nu)
    kappa = sk.skew_sd(params.alpha) / nu
    mu = params.xi - params.L.solve_lower_t(sk.skew_mean(params.alpha) / kappa)
    return DirectParams(mu, params.alpha.copy(), np.log(kappa), params.L)


def params_direct_to_center(params: DirectParams) -> CenteredParams:
    kappa = np.exp(params.log_kappa)
    nu = sk.skew_sd(params.alpha) / kappa
    xi = params.mu + params.L.solve_lower_t(sk.skew_mean(params.alpha) / kappa)
    return CenteredParams(xi, params.alpha.copy(), np.log(nu), params.L)


def centered_sample(params: CenteredParams, noise: NoiseDraw) -> np.ndarray:
    u, v = noise.u, noise.v
    zc = sk.sample_skew_normal_centered(_col(params.alpha, u), u, v)
    return _col(params.xi, u) + params.L.solve_lower_t(_col(np.exp(params.log_nu), u) * zc)


def centered_log_density(params: CenteredParams, theta) -> np.ndarray:
    return sdgm_log_density(params_center_to_direct(params), theta)


def centered_grad_theta(params: CenteredParams, theta) -> np.ndarray:
    return sdgm_grad_theta(params_center_to_direct(params), theta)


def centered_jvp(params: CenteredParams, noise: NoiseDraw, z) -> dict:
    u, v = noise.u, noise.v
    z = _check_theta(z, params.p)
    alpha = _col(params.alpha, u)
    nu = _col(np.exp(params.log_nu), u)
    zc = sk.sample_skew_normal_centered(alpha, u, v)
    c = params.L.solve_lower(z)
    d_alpha = sk.dZc_dalpha(alpha, u, v) * nu * c
    d_log_nu = nu * zc * c
    a = params.L.solve_lower_t(nu * zc)
    pat = params.L.pattern
    d_L = -a[pat.rows] * c[pat.cols]
    return {"xi": z, "alpha": d_alpha, "log_nu": d_log_nu, "L": d_L}


# --- sinh-arcsinh copula ----------------------------------------------------

def _copula_inner(params: CopulaParams) -> DirectParams:
    """Base-family parameters of the standardized vector L^{-T} Z_alpha^c."""
    sd = sk.skew_sd(params.alpha)
    mu = -params.L.solve_lower_t(sk.skew_mean(params.alpha) / sd)
    return DirectParams(mu, params.alpha.copy(), np.log(sd), params.L)


def copula_sample(params: CopulaParams, noise: NoiseDraw) -> np.ndarray:
    u, v = noise.u, noise.v
    zc = sk.sample_skew_normal_centered(_col(params.alpha, u), u, v)
    w = params.L.solve_lower_t(zc)
    t = sk.sas_forward(_gcol(params.gamma, w), w)
    return _col(params.xi, u) + _col(np.exp(params.log_nu), u) * t


def copula_log_density(params: CopulaParams, theta) -> np.ndarray:
    theta = _check_theta(theta, params.p)
    s = (theta - _col(params.xi, theta)) / _col(np.exp(params.log_nu), theta)
    g = _gcol(params.gamma, s)
    theta_tilde = sk.sas_inverse(g, s)
    inner = sdgm_log_density(_copula_inner(params), theta_tilde)
    log_jac = np.sum(sk.sas_inverse_log_d1(g, s) - _col(params.log_nu, s), axis=0)
    return inner + log_jac


def copula_grad_theta(params: CopulaParams, theta) -> np.ndarray:
    theta = _check_theta(theta, params.p)
    enu = _col(np.exp(params.log_nu), theta)
    s = (theta - _col(params.xi, theta)) / enu
    g = _gcol(params.gamma, s)
    theta_tilde = sk.sas_inverse(g, s)
    tp = sk.sas_inverse_d1(g, s) / enu
    # second-over-first derivative ratio evaluated in ratio form for tail safety
    ratio = sk.sas_inverse_d2_over_d1(g, s) / enu
    inner_grad = sdgm_grad_theta(_copula_inner(params), theta_tilde)
    return tp * inner_grad + ratio


def copula_jvp(params: CopulaParams, noise: NoiseDraw, z) -> dict:
    u, v = noise.u, noise.v
    z = _check_theta(z, params.p)
    alpha = _col(params.alpha, u)
    enu = _col(np.exp(params.log_nu), u)
    zc = sk.sample_skew_normal_centered(alpha, u, v)
    w = params.L.solve_lower_t(zc)
    g = _gcol(params.gamma, w)
    tw = sk.sas_forward(g, w)
    tpw = sk.sas_forward_d1(g, w)
    d_log_nu = enu * tw * z
    zz = tpw * enu * z
    c = params.L.solve_lower(zz)
    d_alpha = sk.dZc_dalpha(alpha, u, v) * c
    pat = params.L.pattern
    d_L = -w[pat.rows] * c[pat.cols]
    d_eps, d_delta = sk.sas_forward_dgamma(g, w)
    delta = np.exp(g.log_delta)
    d_gamma = np.stack([enu * d_eps * z, enu * d_delta * delta * z])
    return {"xi": z, "alpha": d_alpha, "log_nu": d_log_nu, "L": d_L, "gamma": d_gamma}


# --- warm starts ------------------------------------------------------------

def warm_start_copula_from_direct(params: DirectParams) -> CopulaParams:
    """Identity-transform copula parameters reproducing a fitted direct-family
    approximation with alpha = 0 exactly (and closely for general alpha)."""
    cent = params_direct_to_center(params)
    nu = np.exp(cent.log_nu)
    pat = params.L.pattern
    vals = params.L.values * nu[pat.rows] / nu[pat.cols]
    return CopulaParams(
        xi=cent.xi,
        log_nu=cent.log_nu.copy(),
        alpha=cent.alpha.copy(),
        L=UnitLowerSparse(pat, vals),
        gamma=sk.SasParams.identity(params.p),
    )


def copula_to_rescaled_centered(params: CopulaParams) -> CenteredParams:
    """The centered-family parameters equivalent to an identity-transform
    copula: L_c = D_nu^{-1} L D_nu."""
    nu = np.exp(params.log_nu)
    pat = params.L.pattern
    vals = params.L.values * nu[pat.cols] / nu[pat.rows]
    return CenteredParams(
        xi=params.xi.copy(),
        alpha=params.alpha.copy(),
        log_nu=params.log_nu.copy(),
        L=UnitLowerSparse(pat, vals),
    )


# --- family registry --------------------------------------------------------

@dataclass(frozen=True)
class Family:
    """A named variational family: functional kernels plus the block layout
    the optimizer updates.  Frozen blocks are excluded from updates (the
    Gaussian variants pin alpha at zero)."""

    name: str
    kind: str  # direct | centered | copula
    frozen_blocks: frozenset

    @property
    def block_names(self):
        if self.kind == "direct":
            return ("mu", "alpha", "log_kappa", "L")
        if self.kind == "centered":
            return ("xi", "alpha", "log_nu", "L")
        return ("xi", "alpha", "log_nu", "L", "gamma")

    def init_params(self, pattern: SparsityPattern):
        p = pattern.total_dim
        L = UnitLowerSparse.identity(pattern)
        zeros = np.zeros(p)
        if self.kind == "direct":
            return DirectParams(zeros.copy(), zeros.copy(), zeros.copy(), L)
        if self.kind == "centered":
            return CenteredParams(zeros.copy(), zeros.copy(), zeros.copy(), L)
        return CopulaParams(
            zeros.copy(), zeros.copy(), zeros.copy(), L, sk.SasParams.identity(p)
        )

    def sample(self, params, noise):
        return _KERNELS[self.kind]["sample"](params, noise)

    def log_density(self, params, theta):
        return _KERNELS[self.kind]["log_density"](params, theta)

    def grad_theta(self, params, theta):
        return _KERNELS[self.kind]["grad_theta"](params, theta)

    def jvp(self, params, noise, z):
        return _KERNELS[self.kind]["jvp"](params, noise, z)

    def get_blocks(self, params) -> dict:
        out = {}
        for name in self.block_names:
            if name == "L":
                out[name] = params.L.values.copy()
            elif name == "gamma":
                out[name] = np.stack([params.gamma.epsilon, params.gamma.log_delta])
            else:
                out[name] = getattr(params, name).copy()
        return out

    def with_blocks(self, params, blocks: dict):
        kw = {}
        for name in self.block_names:
            arr = blocks[name]
            if name == "L":
                kw["L"] = params.L.with_values(arr)
            elif name == "gamma":
                kw["gamma"] = sk.SasParams(arr[0].copy(), arr[1].copy())
            else:
                kw[name] = np.asarray(arr, dtype=float).copy()
        cls = type(params)
        return cls(**kw)


_KERNELS = {
    "direct": {
        "sample": sdgm_sample,
        "log_density": sdgm_log_density,
        "grad_theta": sdgm_grad_theta,
        "jvp": sdgm_jvp,
    },
    "centered": {
        "sample": centered_sample,
        "log_density": centered_log_density,
        "grad_theta": centered_grad_theta,
        "jvp": centered_jvp,
    },
    "copula": {
        "sample": copula_sample,
        "log_density": copula_log_density,
        "grad_theta": copula_grad_theta,
        "jvp": copula_jvp,
    },
}

FAMILIES = {
    "gva": Family("gva", "direct", frozenset({"alpha"})),
    "sdgm": Family("sdgm", "direct", frozenset()),
    "sdgm_c": Family("sdgm_c", "centered", frozenset()),
    "sdgm_sas": Family("sdgm_sas", "copula", frozenset()),
    "gva_sas": Family("gva_sas", "copula", frozenset({"alpha"})),
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(
            f"unknown family {name!r}; expected one of {sorted(FAMILIES)}"
        ) from None


# --- serialization ----------------------------------------------------------

def params_to_dict(family: Family, params) -> dict:
    doc = {"family": family.name, "pattern": params.L.pattern.describe(), "blocks": {}}
    for name in family.block_names:
        if name == "L":
            doc["blocks"]["L"] = params.L.values.tolist()
        elif name == "gamma":
            doc["blocks"]["gamma_epsilon"] = params.gamma.epsilon.tolist()
            doc["blocks"]["gamma_log_delta"] = params.gamma.log_delta.tolist()
        else:
            doc["blocks"][name] = getattr(params, name).tolist()
    return doc


def params_from_dict(doc: dict):
    family = get_family(doc["family"])
    pattern = SparsityPattern.from_descriptor(doc["pattern"])
    blocks = doc["blocks"]
    L = UnitLowerSparse(pattern, np.asarray(blocks["L"], dtype=float))
    if family.kind == "direct":
        params = DirectParams(
            np.asarray(blocks["mu"]), np.asarray(blocks["alpha"]),
            np.asarray(blocks["log_kappa"]), L,
        )
    elif family.kind == "centered":
        params = CenteredParams(
            np.asarray(blocks["xi"]), np.asarray(blocks["alpha"]),
            np.asarray(blocks["log_nu"]), L,
        )
    else:
        params = CopulaParams(
            np.asarray(blocks["xi"]), np.asarray(blocks["log_nu"]),
            np.asarray(blocks["alpha"]), L,
            sk.SasParams(
                np.asarray(blocks["gamma_epsilon"]),
                np.asarray(blocks["gamma_log_delta"]),
            ),
        )
    return family, params


def params_to_json(family: Family, params) -> str:
    return json.dumps(params_to_dict(family, params), indent=2)


def params_from_json(text: str):
    return params_from_dict(json.loads(text))
