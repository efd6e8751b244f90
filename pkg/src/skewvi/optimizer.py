"""ELBO estimation and stochastic gradient ascent with annealed step sizes
over any (family, target model) pair.

The update is theta <- theta + step * grad_estimate with per-block step
scales; gradients are single-sample (or small-batch) reparametrization
estimates.  Adam is the default adaptive rule; plain SGD is retained.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .families import Family, NoiseDraw
from .models import model_hash


class EvaluationError(RuntimeError):
    """Raised when log h is non-finite at a sampled point."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class FitDiverged(RuntimeError):
    """Raised by the divergence guard; carries the last finite state."""

    def __init__(self, message, params=None, iteration=None, trace=None):
        super().__init__(message)
        self.params = params
        self.iteration = iteration
        self.trace = trace


@dataclass
class Phase:
    iters: int
    scale: float

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("phase iteration count must be >= 1")
        if self.scale <= 0:
            raise ValueError("phase scale must be positive")


@dataclass
class Schedule:
    """Annealed step sizes: ordered phases of (iteration count, base scale),
    per-block multipliers, and the adaptive rule."""

    phases: list
    block_scales: dict = field(default_factory=dict)
    rule: str = "adam"  # "adam" | "plain"
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        self.phases = [ph if isinstance(ph, Phase) else Phase(*ph) for ph in self.phases]
        if self.rule not in ("adam", "plain"):
            raise ValueError(f"unknown rule {self.rule!r}")

    def scale_at(self, t: int) -> float:
        """Base scale for 0-based iteration t; the last phase extends."""
        acc = 0
        for ph in self.phases:
            acc += ph.iters
            if t < acc:
                return ph.scale
        return self.phases[-1].scale

    @staticmethod
    def default(base_scale=0.01, head_iters=20000, anneal_every=10000, n_anneals=6,
                block_scales=None, rule="adam") -> "Schedule":
        """Base scale held for head_iters, then halved every anneal_every."""
        phases = [Phase(head_iters, base_scale)]
        scale = base_scale
        for _ in range(n_anneals):
            scale *= 0.5
            phases.append(Phase(anneal_every, scale))
        return Schedule(phases, block_scales=block_scales or {}, rule=rule)


@dataclass
class FitResult:
    family_name: str
    params: object
    trace: list  # (iteration, elbo_estimate, moving_average) tuples
    n_iters: int
    seed: int
    wall_time: float
    model_hash: str


def _sample_logs(family, params, model, noise: NoiseDraw):
    """Per-sample theta, log h, log q for a (p, m) noise batch."""
    theta = family.sample(params, noise)
    theta2 = theta[:, None] if theta.ndim == 1 else theta
    if not np.all(np.isfinite(theta2)):
        bad = int(np.argmax(~np.all(np.isfinite(theta2), axis=0)))
        raise EvaluationError(
            "non-finite draw from the variational family", theta=theta2[:, bad].copy()
        )
    log_q = np.atleast_1d(family.log_density(params, theta2))
    log_h = np.empty(theta2.shape[1])
    for i in range(theta2.shape[1]):
        log_h[i] = model.log_h(theta2[:, i])
    if not np.all(np.isfinite(log_h)):
        bad = int(np.argmax(~np.isfinite(log_h)))
        raise EvaluationError(
            "non-finite log h at a sampled point", theta=theta2[:, bad].copy()
        )
    return theta2, log_h, log_q


def elbo_estimate(family: Family, params, model, noise: NoiseDraw) -> float:
    """Unbiased Monte Carlo ELBO: mean of log h(theta) - log q(theta)."""
    _, log_h, log_q = _sample_logs(family, params, model, noise)
    return float(np.mean(log_h - log_q))


def _grad_and_elbo(family, params, model, noise: NoiseDraw):
    theta, log_h, log_q = _sample_logs(family, params, model, noise)
    m = theta.shape[1]
    grads = None
    for i in range(m):
        th = theta[:, i]
        z = model.grad_log_h(th) - family.grad_theta(params, th)
        sub = NoiseDraw(noise.u[:, i], noise.v[:, i]) if noise.u.ndim == 2 else noise
        bundle = family.jvp(params, sub, z)
        if grads is None:
            grads = {k: np.array(v, dtype=float) for k, v in bundle.items()}
        else:
            for k, v in bundle.items():
                grads[k] += v
    for k in grads:
        grads[k] /= m
    return grads, float(np.mean(log_h - log_q))


def elbo_gradient_estimate(family: Family, params, model, noise: NoiseDraw) -> dict:
    """Unbiased reparametrization-gradient estimate, one entry per block."""
    grads, _ = _grad_and_elbo(family, params, model, noise)
    return grads


class _Adam:
    def __init__(self, blocks, beta1, beta2, eps):
        self.m = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.t = {k: 0 for k in blocks}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, name, grad, lr):
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad**2
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)


def fit(
    family: Family,
    params,
    model,
    schedule: Schedule | None = None,
    total_iters: int = 20000,
    mc_samples: int = 1,
    seed: int = 0,
    thin: int = 50,
    mavg_window: int = 500,
    frozen_blocks=(),
    guard_factor: float | None = 10.0,
) -> FitResult:
    """Stochastic gradient ascent on the ELBO; deterministic given seed.

    frozen_blocks extends the family's own frozen set (alpha for the
    Gaussian variants); frozen blocks are never updated.  The divergence
    guard aborts when the trace moving average degrades by guard_factor
    relative to its best, or any parameter becomes non-finite.
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    params, trace = _ascend(
        family, params, model,
        schedule or Schedule.default(),
        total_iters, mc_samples, rng, thin, mavg_window,
        frozen_blocks, guard_factor, iter_offset=0, trace=[],
    )
    return FitResult(
        family_name=family.name,
        params=params,
        trace=trace,
        n_iters=total_iters,
        seed=seed,
        wall_time=time.perf_counter() - start,
        model_hash=model_hash(model),
    )


def staged_fit(
    family: Family,
    params,
    model,
    stages,
    schedule: Schedule | None = None,
    mc_samples: int = 1,
    seed: int = 0,
    thin: int = 50,
    mavg_window: int = 500,
    guard_factor: float | None = 10.0,
) -> FitResult:
    """Run fit stage by stage, threading parameters through.

    stages: list of (frozen_block_set, iters) or
    (frozen_block_set, iters, schedule) tuples.  Supports warm-started
    protocols where location/scale and shape blocks are optimized
    alternately.
    """
    if not stages:
        raise ValueError("stages must be nonempty")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    trace = []
    offset = 0
    for stage in stages:
        frozen, iters = stage[0], stage[1]
        stage_schedule = stage[2] if len(stage) > 2 else (schedule or Schedule.default())
        params, trace = _ascend(
            family, params, model, stage_schedule, iters, mc_samples, rng,
            thin, mavg_window, frozen, guard_factor, iter_offset=offset,
            trace=trace,
        )
        offset += iters
    return FitResult(
        family_name=family.name,
        params=params,
        trace=trace,
        n_iters=offset,
        seed=seed,
        wall_time=time.perf_counter() - start,
        model_hash=model_hash(model),
    )


def _ascend(family, params, model, schedule, total_iters, mc_samples, rng,
            thin, mavg_window, frozen_blocks, guard_factor, iter_offset, trace):
    frozen = set(family.frozen_blocks) | set(frozen_blocks)
    unknown = frozen - set(family.block_names)
    if unknown:
        raise ValueError(f"unknown frozen blocks {sorted(unknown)}")
    blocks = family.get_blocks(params)
    adam = _Adam(blocks, schedule.beta1, schedule.beta2, schedule.eps) \
        if schedule.rule == "adam" else None
    p = params.p
    recorded = []
    best_mavg = -np.inf
    keep = max(1, mavg_window // max(thin, 1))

    for t in range(total_iters):
        noise = NoiseDraw.draw(rng, p, mc_samples)
        cur = family.with_blocks(params, blocks)
        try:
            grads, elbo = _grad_and_elbo(family, cur, model, noise)
        except EvaluationError as exc:
            if t == 0 and iter_offset == 0:
                raise  # broken at the starting point: not a divergence
            raise FitDiverged(
                f"evaluation failed at iteration {iter_offset + t}: {exc}",
                params=cur, iteration=iter_offset + t, trace=trace,
            )
        base = schedule.scale_at(t)
        for name in family.block_names:
            if name in frozen:
                continue
            g = grads[name]
            lr = base * schedule.block_scales.get(name, 1.0)
            step = adam.step(name, g, lr) if adam is not None else lr * g
            blocks[name] = blocks[name] + step

        if t % thin == 0:
            recorded.append(elbo)
            mavg = float(np.mean(recorded[-keep:]))
            trace.append((iter_offset + t, elbo, mavg))
            if guard_factor is not None:
                best_mavg = max(best_mavg, mavg)
                if mavg < best_mavg - guard_factor * (1.0 + abs(best_mavg)):
                    raise FitDiverged(
                        f"ELBO moving average degraded at iteration {iter_offset + t}",
                        params=family.with_blocks(params, blocks),
                        iteration=iter_offset + t,
                        trace=trace,
                    )
        if not all(np.all(np.isfinite(v)) for v in blocks.values()):
            raise FitDiverged(
                f"non-finite parameter at iteration {iter_offset + t}",
                params=cur, iteration=iter_offset + t, trace=trace,
            )

    return family.with_blocks(params, blocks), trace


def trace_to_csv(trace) -> str:
    """CSV text for an ELBO trace: '.' decimal, LF endings, header always."""
    lines = ["iteration,elbo_estimate,moving_average"]
    for it, elbo, mavg in trace:
        lines.append(f"{it},{_fmt(elbo)},{_fmt(mavg)}")
    return "\n".join(lines) + "\n"


def trace_from_csv(text: str):
    rows = text.strip().splitlines()[1:]
    out = []
    for row in rows:
        it, elbo, mavg = row.split(",")
        out.append((int(it), float(elbo), float(mavg)))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))
