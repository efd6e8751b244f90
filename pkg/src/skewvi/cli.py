"""Operator surface: configure a model + family + schedule, ingest CSV
data, run fits, and emit traces/summaries/params.

Config files are TOML (human-editable, sectioned) or JSON with the same
schema; see README for the grammar.  Exit codes: 0 success, 1 oracle
failure (check), 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np
import pandas as pd
import scipy

from . import __version__, diagnostics, families, models, optimizer
from .families import get_family
from .optimizer import FitDiverged, FitResult, Schedule, fit, staged_fit


class ConfigError(Exception):
    pass


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            if str(path).endswith(".json"):
                cfg = json.load(fh)
            else:
                cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}")
    if "config" in cfg and "config_hash" in cfg:
        cfg = cfg["config"]  # a run manifest embeds its config
    base = os.path.dirname(os.path.abspath(path))
    model = cfg.get("model", {})
    if "data" in model and not os.path.isabs(model["data"]):
        model["data"] = os.path.normpath(os.path.join(base, model["data"]))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:16]


def _require(cfg, section, key=None):
    if section not in cfg:
        raise ConfigError(f"missing config section [{section}]")
    if key is not None and key not in cfg[section]:
        raise ConfigError(f"missing config field {section}.{key}")
    return cfg[section] if key is None else cfg[section][key]


def build_family(cfg):
    name = _require(cfg, "family", "name")
    try:
        return get_family(name)
    except ValueError as exc:
        raise ConfigError(f"family.name: {exc}")


def build_model(cfg):
    section = _require(cfg, "model")
    try:
        return models.build_model(section)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model section: {exc}")


def build_schedule(opt_cfg) -> Schedule:
    rule = opt_cfg.get("rule", "adam")
    block_scales = dict(opt_cfg.get("block_scales", {}))
    if "phases" in opt_cfg:
        phases = [(int(it), float(sc)) for it, sc in opt_cfg["phases"]]
        return Schedule(phases, block_scales=block_scales, rule=rule)
    return Schedule.default(
        base_scale=float(opt_cfg.get("base_scale", 0.01)),
        block_scales=block_scales, rule=rule,
    )


def _init_params(family, model, opt_cfg):
    params = family.init_params(model.pattern)
    warm = opt_cfg.get("warm_start")
    if not warm:
        return params
    with open(warm) as fh:
        src_family, src_params = families.params_from_json(fh.read())
    if src_family.kind == family.kind:
        return src_params
    if src_family.kind == "direct" and family.kind == "centered":
        return families.params_direct_to_center(src_params)
    if src_family.kind == "direct" and family.kind == "copula":
        return families.warm_start_copula_from_direct(src_params)
    raise ConfigError(
        f"cannot warm start family {family.name!r} from {src_family.name!r}"
    )


def _atomic_write(path, text):
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp_")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _out_dir(cfg, override=None):
    out = override or _require(cfg, "output", "directory")
    root = os.environ.get("SKEWVI_OUT_ROOT")
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def cmd_fit(args) -> int:
    try:
        cfg = load_config(args.config)
        family = build_family(cfg)
        model = build_model(cfg)
        opt_cfg = cfg.get("optimizer", {})
        seed = int(args.seed if args.seed is not None else opt_cfg.get("seed", 0))
        iters = int(args.iters if args.iters is not None else opt_cfg.get("iters", 20000))
        mc = int(opt_cfg.get("mc_samples", 1))
        thin = int(cfg.get("output", {}).get("thinning", 50))
        schedule = build_schedule(opt_cfg)
        params = _init_params(family, model, opt_cfg)
        out = _out_dir(cfg, args.out)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if "stages" in opt_cfg:
            stages = [(set(fr), int(it)) for fr, it in opt_cfg["stages"]]
            result = staged_fit(family, params, model, stages, schedule=schedule,
                                mc_samples=mc, seed=seed, thin=thin)
        else:
            result = fit(family, params, model, schedule=schedule,
                         total_iters=iters, mc_samples=mc, seed=seed, thin=thin)
    except FitDiverged as exc:
        diverged_path = os.path.join(out, "last-finite-params.json")
        if exc.params is not None:
            _atomic_write(diverged_path, families.params_to_json(family, exc.params))
        print(
            f"numerical divergence: {exc}; last finite params at {diverged_path}",
            file=sys.stderr,
        )
        return 3

    summary = diagnostics.summarize(
        family, result.params,
        int(cfg.get("output", {}).get("summary_samples", 100000)),
        seed=seed,
    )
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "family": family.name,
        "model_hash": result.model_hash,
        "n_iters": result.n_iters,
        "versions": {
            "skewvi": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "python": sys.version.split()[0],
        },
    }
    _atomic_write(os.path.join(out, "params.json"),
                  families.params_to_json(family, result.params))
    _atomic_write(os.path.join(out, "trace.csv"),
                  optimizer.trace_to_csv(result.trace))
    _atomic_write(os.path.join(out, "summary.csv"), summary.to_csv())
    _atomic_write(os.path.join(out, "run-manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True))
    if not args.quiet:
        print(f"fit complete: {result.n_iters} iterations, "
              f"final smoothed ELBO {result.trace[-1][2]:.4f}, artifacts in {out}")
    return 0


def _load_run(run_dir):
    with open(os.path.join(run_dir, "run-manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(run_dir, "params.json")) as fh:
        family, params = families.params_from_json(fh.read())
    with open(os.path.join(run_dir, "trace.csv")) as fh:
        trace = optimizer.trace_from_csv(fh.read())
    result = FitResult(
        family_name=family.name, params=params, trace=trace,
        n_iters=manifest["n_iters"], seed=manifest["seed"], wall_time=0.0,
        model_hash=manifest["model_hash"],
    )
    return family, result


def cmd_compare(args) -> int:
    try:
        loaded = [_load_run(d) for d in args.run_dirs]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"config error: cannot load run dir: {exc}", file=sys.stderr)
        return 2
    fams = [f for f, _ in loaded]
    fits = [r for _, r in loaded]
    try:
        report = diagnostics.compare_fits(fits, families=fams, seed=args.seed or 0)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    text = report.to_csv()
    if args.out:
        _atomic_write(args.out, text)
        if not args.quiet:
            print(f"comparison written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_check(args) -> int:
    try:
        cfg = load_config(args.config)
        family = build_family(cfg)
        model = build_model(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    rng = np.random.default_rng(int(args.seed if args.seed is not None else 0))
    params = family.init_params(model.pattern)
    blocks = family.get_blocks(params)
    for name in family.block_names:
        if name == "gamma":
            continue
        blocks[name] = blocks[name] + 0.3 * rng.standard_normal(blocks[name].shape)
    params = family.with_blocks(params, blocks)
    corrupt = 1.01 if args.inject_gradient_error else 1.0

    ok = True

    def _report(label, passed, detail):
        nonlocal ok
        ok = ok and passed
        status = "pass" if passed else "FAIL"
        print(f"{status}  {label}  ({detail})")

    for trial in range(3):
        point = 0.5 * rng.standard_normal(model.p)
        rep = diagnostics.fd_check_gradient(
            model.log_h, lambda th: corrupt * model.grad_log_h(th), point, tol=1e-5
        )
        _report(f"model gradient @ random point {trial}", rep.passed,
                f"worst rel err {rep.worst:.2e}")
    for trial in range(3):
        point = family.sample(params, families.NoiseDraw.draw(rng, model.p))
        rep = diagnostics.fd_check_gradient(
            lambda th: float(family.log_density(params, th)),
            lambda th: corrupt * family.grad_theta(params, th),
            point, tol=1e-5,
        )
        _report(f"family score @ sampled point {trial}", rep.passed,
                f"worst rel err {rep.worst:.2e}")
    if model.p <= 2:
        draws = family.sample(params, families.NoiseDraw.draw(rng, model.p, 20000))
        box = diagnostics.box_from_samples(draws)
        total = diagnostics.quadrature_normalization(
            lambda th: family.log_density(params, th), model.p, box
        )
        _report("density normalization", abs(total - 1.0) < 1e-4,
                f"integral {total:.6f}")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    seed = int(args.seed or 0)
    if args.kind == "glmm":
        re_chol = np.array([[float(args.re_sd)]]) if args.r == 1 else \
            float(args.re_sd) * np.eye(args.r)
        spec, truth = models.synthesize_glmm(
            n_groups=args.groups, obs_per_group=args.obs,
            beta=[float(x) for x in args.beta.split(",")],
            re_chol=re_chol, response_kind=args.response_kind,
            re_prior=args.re_prior, seed=seed,
        )
        frame = pd.DataFrame({"y": spec.y, "group": spec.groups})
        for j in range(1, spec.q):
            frame[f"x{j}"] = spec.X[:, j]
        for j in range(1, spec.r):
            frame[f"z{j}"] = spec.Z[:, j]
        text = frame.to_csv(index=False, lineterminator="\n")
    elif args.kind == "sv":
        spec, truth = models.synthesize_sv(
            n=args.n, sigma=args.sigma, phi=args.phi, kappa=args.kappa, seed=seed
        )
        text = pd.DataFrame({"y": spec.y}).to_csv(index=False, lineterminator="\n")
    else:
        print(f"config error: unknown synth kind {args.kind!r}", file=sys.stderr)
        return 2
    _atomic_write(args.out, text)
    if not args.quiet:
        print(f"synthetic {args.kind} dataset written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skewvi",
        description="Fit structured skew variational approximations to "
        "latent-variable posteriors.",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress chatter")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="run a variational fit from a config")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--out", help="override output directory")
    p_fit.add_argument("--seed", type=int, help="override optimizer seed")
    p_fit.add_argument("--iters", type=int, help="override iteration budget")
    p_fit.set_defaults(func=cmd_fit)

    p_cmp = sub.add_parser("compare", help="compare finished run directories")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", help="write comparison CSV here (default stdout)")
    p_cmp.add_argument("--seed", type=int)
    p_cmp.set_defaults(func=cmd_compare)

    p_chk = sub.add_parser("check", help="run gradient/quadrature oracles")
    p_chk.add_argument("--config", required=True)
    p_chk.add_argument("--seed", type=int)
    p_chk.add_argument("--inject-gradient-error", action="store_true",
                       help="negative-control mode: corrupt gradients so the "
                       "oracles must fail")
    p_chk.set_defaults(func=cmd_check)

    p_syn = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p_syn.add_argument("--kind", choices=["glmm", "sv"], required=True)
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--groups", type=int, default=50)
    p_syn.add_argument("--obs", type=int, default=5)
    p_syn.add_argument("--beta", default="0.5,0.3", help="comma-separated")
    p_syn.add_argument("--re-sd", default="1.0")
    p_syn.add_argument("--r", type=int, default=1)
    p_syn.add_argument("--response-kind", default="bernoulli",
                       choices=["bernoulli", "poisson"])
    p_syn.add_argument("--re-prior", default="normal",
                       choices=["normal", "student_t"])
    p_syn.add_argument("--n", type=int, default=2000, help="sv series length")
    p_syn.add_argument("--sigma", type=float, default=0.4)
    p_syn.add_argument("--phi", type=float, default=0.95)
    p_syn.add_argument("--kappa", type=float, default=-0.5)
    p_syn.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
