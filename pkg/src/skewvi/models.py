"""Target posteriors log h(theta) = log p(theta) + log p(y|theta) with
analytic gradients: generalized linear mixed models (bernoulli-logit or
poisson-log response, normal or Student-t random effects) and a stochastic
volatility state space model, plus synthetic data generators and CSV
ingestion.

Parameter layout is always (b_1, ..., b_n, beta, hyper): local latent
blocks first, then fixed effects, then the random-effect scale parameters
(log-sd zeta for scalar effects, vech of the covariance Cholesky factor
with log diagonal otherwise).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

from .sparse_graph import SparsityPattern, build_pattern

LOG2PI = np.log(2.0 * np.pi)


def _log1pexp(x):
    return np.logaddexp(0.0, x)


@dataclass
class GlmmSpec:
    """Data and prior choices for a GLMM with grouped random effects."""

    response_kind: str  # "bernoulli" | "poisson"
    y: np.ndarray
    X: np.ndarray  # (N, q) fixed-effect design
    Z: np.ndarray  # (N, r) random-effect design
    groups: np.ndarray  # (N,) integer group ids, 0..n_groups-1
    re_prior: str = "normal"  # "normal" | "student_t"
    df: float = 10.0
    fixed_prior_var: float = 100.0
    hyper_prior_var: float = 100.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.groups = np.asarray(self.groups, dtype=int)
        n_rows = len(self.y)
        if self.X.shape[0] != n_rows or self.Z.shape[0] != n_rows:
            raise ValueError("design row counts must match the response length")
        if self.groups.shape != (n_rows,):
            raise ValueError("groups must be one id per row")
        if self.groups.min() < 0:
            raise ValueError("group ids must be nonnegative")
        if self.response_kind not in ("bernoulli", "poisson"):
            raise ValueError(f"unknown response kind {self.response_kind!r}")
        if self.re_prior not in ("normal", "student_t"):
            raise ValueError(f"unknown random-effect prior {self.re_prior!r}")
        if self.re_prior == "student_t" and self.df <= 0:
            raise ValueError("Student-t prior needs df > 0")

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1

    @property
    def r(self) -> int:
        return self.Z.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[1]


def _vech_indices(r):
    """Column-major lower-triangle index pairs, diagonal included."""
    return [(i, j) for j in range(r) for i in range(j, r)]


class GlmmModel:
    """TargetModel for a GLMM; immutable after construction."""

    def __init__(self, spec: GlmmSpec):
        self.spec = spec
        self.n = spec.n_groups
        self.r = spec.r
        self.q = spec.q
        self.n_hyper = 1 if self.r == 1 else self.r * (self.r + 1) // 2
        self.p = self.n * self.r + self.q + self.n_hyper
        self.pattern: SparsityPattern = build_pattern(
            self.n, [self.r] * self.n, self.q + self.n_hyper, markov_order=0
        )
        self._vech = _vech_indices(self.r)

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        nb = self.n * self.r
        b = theta[:nb].reshape(self.n, self.r)
        beta = theta[nb:nb + self.q]
        hyper = theta[nb + self.q:]
        return b, beta, hyper

    def _chol(self, hyper):
        """Random-effect covariance factor B (lower) from stored hyper
        values; diagonal is stored on the log scale."""
        B = np.zeros((self.r, self.r))
        for v, (i, j) in zip(hyper, self._vech):
            B[i, j] = np.exp(v) if i == j else v
        return B

    def log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite theta")
        b, beta, hyper = self.split(theta)
        s = self.spec
        eta = s.X @ beta + np.sum(s.Z * b[s.groups], axis=1)
        if s.response_kind == "bernoulli":
            lik = np.sum(s.y * eta - _log1pexp(eta))
        else:
            lik = np.sum(s.y * eta - np.exp(eta) - gammaln(s.y + 1.0))
        out = lik + self._log_prior_b(b, hyper)
        out += -0.5 * np.sum(beta**2) / s.fixed_prior_var \
            - 0.5 * self.q * np.log(2.0 * np.pi * s.fixed_prior_var)
        out += -0.5 * np.sum(hyper**2) / s.hyper_prior_var \
            - 0.5 * self.n_hyper * np.log(2.0 * np.pi * s.hyper_prior_var)
        return float(out)

    def _log_prior_b(self, b, hyper):
        s = self.spec
        n, r, d = self.n, self.r, s.df
        if r == 1:
            zeta = hyper[0]
            bb = b[:, 0]
            if s.re_prior == "normal":
                return -n * zeta - 0.5 * n * LOG2PI \
                    - 0.5 * np.sum(bb**2) * np.exp(-2.0 * zeta)
            lognorm = gammaln((d + 1) / 2) - gammaln(d / 2) \
                - 0.5 * np.log(d * np.pi) - zeta
            return n * lognorm - 0.5 * (d + 1) * np.sum(
                np.log1p(bb**2 * np.exp(-2.0 * zeta) / d))
        B = self._chol(hyper)
        M = solve_triangular(B, b.T, lower=True)  # (r, n), columns B^{-1} b_i
        quad = np.sum(M**2, axis=0)
        logdet_half = np.sum(np.log(np.diag(B)))
        if s.re_prior == "normal":
            return -0.5 * n * r * LOG2PI - n * logdet_half - 0.5 * np.sum(quad)
        lognorm = gammaln((d + r) / 2) - gammaln(d / 2) \
            - 0.5 * r * np.log(d * np.pi) - logdet_half
        return n * lognorm - 0.5 * (d + r) * np.sum(np.log1p(quad / d))

    def grad_log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite theta")
        b, beta, hyper = self.split(theta)
        s = self.spec
        eta = s.X @ beta + np.sum(s.Z * b[s.groups], axis=1)
        if s.response_kind == "bernoulli":
            deta = s.y - expit(eta)
        else:
            deta = s.y - np.exp(eta)
        g_beta = s.X.T @ deta - beta / s.fixed_prior_var
        g_b = np.zeros_like(b)
        np.add.at(g_b, s.groups, s.Z * deta[:, None])
        g_hyper = -hyper / s.hyper_prior_var
        self._add_prior_b_grads(b, hyper, g_b, g_hyper)
        return np.concatenate([g_b.ravel(), g_beta, g_hyper])

    def _add_prior_b_grads(self, b, hyper, g_b, g_hyper):
        s = self.spec
        n, r, d = self.n, self.r, s.df
        if r == 1:
            zeta = hyper[0]
            bb = b[:, 0]
            if s.re_prior == "normal":
                g_b[:, 0] += -bb * np.exp(-2.0 * zeta)
                g_hyper[0] += -n + np.sum(bb**2) * np.exp(-2.0 * zeta)
            else:
                denom = d * np.exp(2.0 * zeta) + bb**2
                g_b[:, 0] += -(d + 1) * bb / denom
                g_hyper[0] += -n + (d + 1) * np.sum(bb**2 / denom)
            return
        B = self._chol(hyper)
        M = solve_triangular(B, b.T, lower=True)  # (r, n)
        A = solve_triangular(B, M, lower=True, trans="T")  # columns B^{-T} m_i
        if s.re_prior == "normal":
            weights = np.ones(n)
        else:
            quad = np.sum(M**2, axis=0)
            weights = (d + r) / (d + quad)
        g_b += -(A * weights).T
        GB = (A * weights) @ M.T  # d/dB of the quadratic part
        for k, (i, j) in enumerate(self._vech):
            g = GB[i, j]
            if i == j:
                g = g * B[i, i] - n  # log-scale chain + determinant term
            g_hyper[k] += g

    def describe(self) -> dict:
        s = self.spec
        return {
            "kind": "glmm",
            "response_kind": s.response_kind,
            "re_prior": s.re_prior,
            "df": s.df,
            "fixed_prior_var": s.fixed_prior_var,
            "hyper_prior_var": s.hyper_prior_var,
            "n_groups": self.n,
            "r": self.r,
            "q": self.q,
            "data_digest": _data_digest(s.y, s.X, s.Z, s.groups),
        }


@dataclass
class SvSpec:
    """Returns series and prior variance for the unconstrained globals."""

    y: np.ndarray
    prior_var: float = 10.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if len(self.y) < 2:
            raise ValueError("need at least two observations")


class SvModel:
    """Stochastic volatility model in unconstrained parametrization.

    theta = (b_1, ..., b_n, a, psi, k) with volatility scale
    sigma = log(1 + exp(a)) and AR coefficient phi = logistic(psi); the
    observation i has variance exp(2 * (sigma * b_i + k)).
    """

    def __init__(self, spec: SvSpec):
        self.spec = spec
        self.n = len(spec.y)
        self.p = self.n + 3
        self.pattern: SparsityPattern = build_pattern(
            self.n, [1] * self.n, 3, markov_order=1
        )

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[:self.n], theta[self.n], theta[self.n + 1], theta[self.n + 2]

    def log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite theta")
        b, a, psi, k = self.split(theta)
        y, pv = self.spec.y, self.spec.prior_var
        sigma = _log1pexp(a)
        phi = expit(psi)
        lam = sigma * b + k
        lik = np.sum(-0.5 * LOG2PI - lam - 0.5 * y**2 * np.exp(-2.0 * lam))
        state = -0.5 * LOG2PI + 0.5 * np.log1p(-phi**2) - 0.5 * (1 - phi**2) * b[0] ** 2
        resid = b[1:] - phi * b[:-1]
        state += np.sum(-0.5 * LOG2PI - 0.5 * resid**2)
        prior = -(a**2 + psi**2 + k**2) / (2.0 * pv) - 1.5 * np.log(2.0 * np.pi * pv)
        return float(lik + state + prior)

    def grad_log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite theta")
        b, a, psi, k = self.split(theta)
        y, pv = self.spec.y, self.spec.prior_var
        sigma = _log1pexp(a)
        phi = expit(psi)
        lam = sigma * b + k
        e = -1.0 + y**2 * np.exp(-2.0 * lam)
        g_b = sigma * e
        g_b[0] += -(1 - phi**2) * b[0]
        resid = b[1:] - phi * b[:-1]
        g_b[1:] += -resid
        g_b[:-1] += phi * resid
        g_a = np.sum(b * e) * expit(a) - a / pv
        dphi = -phi / (1 - phi**2) + phi * b[0] ** 2 + np.sum(resid * b[:-1])
        g_psi = dphi * phi * (1 - phi) - psi / pv
        g_k = np.sum(e) - k / pv
        return np.concatenate([g_b, [g_a, g_psi, g_k]])

    def describe(self) -> dict:
        return {
            "kind": "sv",
            "prior_var": self.spec.prior_var,
            "n": self.n,
            "data_digest": _data_digest(self.spec.y),
        }


def _data_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def model_hash(model) -> str:
    return hashlib.sha256(
        json.dumps(model.describe(), sort_keys=True).encode()
    ).hexdigest()[:16]


# --- synthetic data ---------------------------------------------------------

def synthesize_glmm(
    n_groups,
    obs_per_group,
    beta,
    re_chol,
    response_kind="bernoulli",
    re_prior="normal",
    df=10.0,
    seed=0,
    random_cols=None,
):
    """Draw a reproducible synthetic GLMM dataset from the generative model.

    beta: fixed effects; the first design column is an intercept, the rest
    are iid standard normal covariates.  re_chol: scalar random-effect sd
    (r=1) or a lower-triangular Cholesky factor of the covariance (r>1).
    random_cols optionally supplies the per-observation random design
    columns beyond the intercept (length obs_per_group each).

    Returns (GlmmSpec, truth) where truth records the generating parameter
    vector in model layout.
    """
    rng = np.random.default_rng(seed)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    q = len(beta)
    re_chol = np.atleast_2d(np.asarray(re_chol, dtype=float))
    r = re_chol.shape[0]
    N = n_groups * obs_per_group
    groups = np.repeat(np.arange(n_groups), obs_per_group)

    X = np.ones((N, q))
    if q > 1:
        X[:, 1:] = rng.standard_normal((N, q - 1))
    Z = np.ones((N, r))
    if r > 1:
        if random_cols is not None:
            cols = np.atleast_2d(np.asarray(random_cols, dtype=float))
            Z[:, 1:] = np.tile(cols.T, (n_groups, 1))
        else:
            Z[:, 1:] = rng.standard_normal((N, r - 1))

    raw = rng.standard_normal((n_groups, r))
    if re_prior == "student_t":
        mix = rng.chisquare(df, size=n_groups) / df
        raw = raw / np.sqrt(mix)[:, None]
    b = raw @ re_chol.T

    eta = X @ beta + np.sum(Z * b[groups], axis=1)
    if response_kind == "bernoulli":
        y = (rng.random(N) < expit(eta)).astype(float)
    elif response_kind == "poisson":
        y = rng.poisson(np.exp(np.clip(eta, None, 12.0))).astype(float)
    else:
        raise ValueError(f"unknown response kind {response_kind!r}")

    spec = GlmmSpec(
        response_kind=response_kind, y=y, X=X, Z=Z, groups=groups,
        re_prior=re_prior, df=df,
    )
    if r == 1:
        hyper = np.array([np.log(re_chol[0, 0])])
    else:
        hyper = np.array([
            np.log(re_chol[i, j]) if i == j else re_chol[i, j]
            for (i, j) in _vech_indices(r)
        ])
    truth = {
        "theta": np.concatenate([b.ravel(), beta, hyper]),
        "beta": beta,
        "b": b,
        "hyper": hyper,
    }
    return spec, truth


def synthesize_sv(n, sigma, phi, kappa, seed=0):
    """Draw a synthetic returns series from the stochastic volatility model."""
    rng = np.random.default_rng(seed)
    b = np.empty(n)
    b[0] = rng.standard_normal() / np.sqrt(1 - phi**2)
    for i in range(1, n):
        b[i] = phi * b[i - 1] + rng.standard_normal()
    y = np.exp(sigma * b + kappa) * rng.standard_normal(n)
    truth = {
        "b": b,
        "a": np.log(np.expm1(sigma)),
        "psi": np.log(phi / (1 - phi)),
        "kappa": kappa,
    }
    return SvSpec(y=y), truth


# --- CSV ingestion ----------------------------------------------------------

def _resolve_columns(frame, names, derived):
    cols = []
    for name in names:
        if name == "intercept":
            cols.append(np.ones(len(frame)))
        elif name in derived:
            cols.append(derived[name])
        elif name in frame.columns:
            cols.append(frame[name].to_numpy(dtype=float))
        else:
            raise KeyError(f"column {name!r} not found in data")
    return np.column_stack(cols)


def load_glmm_csv(path, cfg) -> GlmmSpec:
    """Build a GlmmSpec from a headered CSV and a column-mapping config.

    cfg keys: response, group, fixed (list), random (list), response_kind,
    and optionally re_prior, df, fixed_prior_var, hyper_prior_var, derived.
    The pseudo-column "intercept" yields a column of ones.  derived is a
    list of affine recodes {name, column, scale, offset}.
    """
    frame = pd.read_csv(path)
    derived = {}
    for spec in cfg.get("derived", []):
        base = frame[spec["column"]].to_numpy(dtype=float)
        derived[spec["name"]] = base * spec.get("scale", 1.0) + spec.get("offset", 0.0)
    group_labels = frame[cfg["group"]]
    codes = pd.factorize(group_labels)[0]
    return GlmmSpec(
        response_kind=cfg["response_kind"],
        y=frame[cfg["response"]].to_numpy(dtype=float),
        X=_resolve_columns(frame, cfg["fixed"], derived),
        Z=_resolve_columns(frame, cfg["random"], derived),
        groups=codes,
        re_prior=cfg.get("re_prior", "normal"),
        df=float(cfg.get("df", 10.0)),
        fixed_prior_var=float(cfg.get("fixed_prior_var", 100.0)),
        hyper_prior_var=float(cfg.get("hyper_prior_var", 100.0)),
    )


def load_sv_csv(path, cfg) -> SvSpec:
    frame = pd.read_csv(path)
    return SvSpec(
        y=frame[cfg["response"]].to_numpy(dtype=float),
        prior_var=float(cfg.get("prior_var", 10.0)),
    )


def build_model(cfg):
    """Construct a TargetModel from a config 'model' section."""
    kind = cfg.get("kind")
    if kind == "glmm":
        return GlmmModel(load_glmm_csv(cfg["data"], cfg))
    if kind == "sv":
        return SvModel(load_sv_csv(cfg["data"], cfg))
    raise ValueError(f"unknown model kind {kind!r}")
