"""Command line runner: single fits, named experiments, and imputation.

One JSON config per run; the subcommand decides its schema.  Validation
errors always carry the offending field path.  Exit codes: 0 on success,
2 for configuration problems, 3 for numeric failures (diverged fits,
broken chains, singular proposals).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .chains import save_chain, save_state
from .evaluation import MaskError, generate_coupled, heldout_loglik
from .expfam import ConjugateHyper, DomainError, SupportError
from .experiments import (RECIPES, make_recipe_config, run_beta_sweep,
                          write_rows_csv)
from .gibecca import GibeccaOptions, ProposalError, StageError, run_gibecca
from .hmc_infer import ChainError, ExchangeOptions, HmcOptions, run_hmc_chain
from .map_infer import FitError, FoldInError, MapOptions, fit_map
from .model import (ConfigError, LayoutError, ShapeError, assemble_theta,
                    load_observations, make_layout)
from .prior import PriorSpec
from .spect import ParseError, load_or_fallback, make_holdout

_MISSING = object()

CONFIG_FAILURES = (ConfigError, ParseError, LayoutError, ShapeError,
                   DomainError, SupportError)
NUMERIC_FAILURES = (FitError, FoldInError, ChainError, StageError,
                    ProposalError, MaskError, np.linalg.LinAlgError,
                    FloatingPointError, OverflowError, ValueError)


def _as_dict(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return value


def _get(d, key, path, default=_MISSING):
    if key in d:
        return d[key]
    if default is _MISSING:
        raise ConfigError(f"{path}.{key}: required field is missing")
    return default


def _no_unknown(d, allowed, path):
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field")


def _wrap(path, fn, *args, **kwargs):
    """Run a constructor, tagging any validation error with the path."""
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_layout(d, path="layout"):
    d = _as_dict(d, path)
    _no_unknown(d, {"model", "view_widths", "ranks", "families", "alpha",
                    "mean_row"}, path)
    return _wrap(path, make_layout,
                 _get(d, "model", path),
                 _get(d, "view_widths", path),
                 _get(d, "ranks", path),
                 _get(d, "families", path),
                 alpha=d.get("alpha"),
                 use_mean_row=bool(d.get("mean_row", False)))


def build_prior(d, path="prior"):
    d = _as_dict(d, path)
    _no_unknown(d, {"beta", "a_hyper", "sigma_u", "sigma_v", "gamma"}, path)
    raw = _get(d, "a_hyper", path)
    if not isinstance(raw, (list, tuple)) or not raw:
        raise ConfigError(f"{path}.a_hyper: expected [lam, nu] or a list of "
                          "such pairs")
    if isinstance(raw[0], (list, tuple)):
        hyper = _wrap(f"{path}.a_hyper",
                      lambda: tuple(ConjugateHyper(*pair) for pair in raw))
    else:
        hyper = _wrap(f"{path}.a_hyper", ConjugateHyper, *raw)
    return _wrap(path, PriorSpec,
                 beta=_get(d, "beta", path), a_hyper=hyper,
                 sigma_u=d.get("sigma_u", 1.0),
                 sigma_v=d.get("sigma_v", 1.0),
                 gamma=d.get("gamma"))


_OPTION_CLASSES = {"map": MapOptions, "hmc": HmcOptions,
                   "gibecca": GibeccaOptions}
_UNSETTABLE = {"fix_v", "initial_state", "initial_theta"}


def build_options(engine, d, path="options", seed=None):
    if engine not in _OPTION_CLASSES:
        raise ConfigError(f"engine: must be one of "
                          f"{sorted(_OPTION_CLASSES)}, got {engine!r}")
    cls = _OPTION_CLASSES[engine]
    d = dict(_as_dict(d, path)) if d is not None else {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    exchange = d.pop("exchange", None)
    for key, value in d.items():
        if key not in fields or key in _UNSETTABLE:
            raise ConfigError(f"{path}.{key}: unknown field for engine "
                              f"{engine}")
        kind = fields[key].type
        try:
            if kind == "int":
                value = int(value)
            elif kind == "float":
                value = float(value)
            elif kind == "bool":
                value = bool(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.{key}: {exc}") from exc
        kwargs[key] = value
    if engine == "hmc" and exchange is not None:
        exchange = _as_dict(exchange, f"{path}.exchange")
        _no_unknown(exchange, {"inner_sweeps", "prop_scale"},
                    f"{path}.exchange")
        kwargs["exchange"] = _wrap(f"{path}.exchange", ExchangeOptions,
                                   **exchange)
    elif exchange is not None:
        raise ConfigError(f"{path}.exchange: only the hmc engine takes "
                          "exchange options")
    if seed is not None:
        kwargs["seed"] = int(seed)
    return _wrap(path, cls, **kwargs)


def load_data(d, spect_path=None, path="data"):
    """(observations, notice) from a data section.

    Three sources: {"csv": ..., "descriptor": ...} for files, "spect" for
    the binary benchmark (honouring --spect), or {"synthetic": {...}} for
    a seeded draw from a low-rank model.
    """
    if d == "spect":
        return load_or_fallback(spect_path)
    d = _as_dict(d, path)
    if "csv" in d:
        _no_unknown(d, {"csv", "descriptor"}, path)
        return _wrap(path, load_observations, d["csv"],
                     _get(d, "descriptor", path)), None
    if "synthetic" in d:
        _no_unknown(d, {"synthetic"}, path)
        s = _as_dict(d["synthetic"], f"{path}.synthetic")
        _no_unknown(s, {"model", "view_widths", "ranks", "families", "alpha",
                        "n_rows", "latent_scale", "target_scale", "seed"},
                    f"{path}.synthetic")
        layout = build_layout(
            {k: s[k] for k in ("model", "view_widths", "ranks", "families",
                               "alpha") if k in s},
            path=f"{path}.synthetic")
        data = _wrap(f"{path}.synthetic", generate_coupled, layout,
                     _get(s, "n_rows", f"{path}.synthetic"),
                     seed=int(s.get("seed", 0)),
                     latent_scale=float(s.get("latent_scale", 1.0)),
                     target_scale=float(s.get("target_scale", 1.0)))
        return data.train, None
    raise ConfigError(f"{path}: expected 'spect', a csv/descriptor pair, "
                      "or a synthetic block")


def _predictive_means(thetas, layout):
    """Average mean parameter over a list of Theta samples."""
    acc = np.zeros_like(thetas[0])
    for theta in thetas:
        for i, fam in enumerate(layout.families):
            cols = layout.cols_view[i]
            acc[:, cols] += fam._gprime(theta[:, cols])
    return acc / len(thetas)


def _scalar_stats(stats):
    return {k: v for k, v in stats.items()
            if isinstance(v, (int, float, bool, str)) or v is None}


def _write_summary(out_dir, summary):
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def cmd_fit(cfg, args):
    cfg = _as_dict(cfg, "config")
    _no_unknown(cfg, {"data", "layout", "prior", "engine", "options",
                      "seed"}, "config")
    layout = build_layout(_get(cfg, "layout", "config"))
    spec = build_prior(_get(cfg, "prior", "config"))
    engine = _get(cfg, "engine", "config")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    opts = build_options(engine, cfg.get("options"), seed=seed)
    obs, notice = load_data(_get(cfg, "data", "config"), args.spect)
    if notice:
        print(notice, file=sys.stderr)

    os.makedirs(args.out, exist_ok=True)
    summary = {"engine": engine, "seed": getattr(opts, "seed", None)}
    if notice:
        summary["data_notice"] = notice
    if engine == "map":
        fit = fit_map(obs, layout, spec, opts)
        save_state(fit.state, args.out,
                   extra={"objective": fit.objective,
                          "converged": fit.converged, "status": fit.status})
        summary.update(objective=fit.objective, converged=fit.converged,
                       status=fit.status, n_iter=fit.n_iter,
                       restart_objectives=fit.restart_objectives)
    else:
        runner = run_hmc_chain if engine == "hmc" else run_gibecca
        chain = runner(obs, layout, spec, opts)
        save_chain(chain, os.path.join(args.out, "chain"), layout)
        summary.update(n_samples=chain.n_samples,
                       stats=_scalar_stats(chain.stats), meta=chain.meta)
    _write_summary(args.out, summary)
    print(f"fit: engine={engine} -> {args.out}")
    return 0


def cmd_experiment(cfg, args):
    cfg = _as_dict(cfg, "config")
    _no_unknown(cfg, {"recipe", "overrides"}, "config")
    name = _get(cfg, "recipe", "config")
    recipe_cfg = make_recipe_config(name, cfg.get("overrides"),
                                    seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    if name == "beta-sweep":
        obs, notice = load_or_fallback(args.spect)
        if notice:
            print(notice, file=sys.stderr)
        result = run_beta_sweep(recipe_cfg, obs, jobs=args.jobs,
                                notice=notice)
    else:
        result = RECIPES[name][1](recipe_cfg, jobs=args.jobs)
    csv_path = os.path.join(args.out, f"{name}.csv")
    write_rows_csv(result.rows, csv_path)
    for key, (chain, layout) in result.chains.items():
        save_chain(chain, os.path.join(args.out, "chains", key), layout)
    result.summary["config"] = dataclasses.asdict(recipe_cfg)
    _write_summary(args.out, result.summary)
    n_failed = sum(r["status"] != "ok" for r in result.rows)
    print(f"experiment {name}: {len(result.rows)} rows "
          f"({n_failed} flagged) -> {csv_path}")
    return 0


def cmd_impute(cfg, args):
    cfg = _as_dict(cfg, "config")
    _no_unknown(cfg, {"data", "layout", "prior", "engine", "options",
                      "holdout", "seed"}, "config")
    layout = build_layout(_get(cfg, "layout", "config"))
    spec = build_prior(_get(cfg, "prior", "config"))
    engine = cfg.get("engine", "map")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    opts = build_options(engine, cfg.get("options"), seed=seed)
    hold = _as_dict(_get(cfg, "holdout", "config"), "holdout")
    _no_unknown(hold, {"fraction", "seed"}, "holdout")
    obs, notice = load_data(_get(cfg, "data", "config"), args.spect)
    if notice:
        print(notice, file=sys.stderr)

    train, held = make_holdout(obs, float(_get(hold, "fraction", "holdout")),
                               seed=int(hold.get("seed", 0)))
    if engine == "map":
        fit = fit_map(train, layout, spec, opts)
        source = fit
        thetas = [assemble_theta(fit.state, layout)]
    else:
        runner = run_hmc_chain if engine == "hmc" else run_gibecca
        chain = runner(train, layout, spec, opts)
        source = chain
        thetas = chain.theta_samples(layout)
    means = _predictive_means(thetas, layout)
    ll = heldout_loglik(source, train, held, layout)

    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.csv")
    with open(pred_path, "w") as fh:
        fh.write("row,col,true,predicted_mean\n")
        for r, c in zip(*np.nonzero(held)):
            fh.write(f"{r},{c},{obs.x[r, c]:.17g},{means[r, c]:.17g}\n")
    summary = {"engine": engine, "heldout_loglik": ll,
               "n_holdout": int(held.sum())}
    if notice:
        summary["data_notice"] = notice
    _write_summary(args.out, summary)
    print(f"impute: {int(held.sum())} entries, heldout_loglik={ll:.6f} "
          f"-> {args.out}")
    return 0


def _parser():
    p = argparse.ArgumentParser(
        prog="expfam-proj",
        description="Low-rank exponential-family models: fitting, "
                    "experiments, imputation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("fit", cmd_fit), ("experiment", cmd_experiment),
                     ("impute", cmd_impute)):
        q = sub.add_parser(name)
        q.add_argument("--config", required=True)
        q.add_argument("--jobs", type=int, default=1)
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--out", default=None)
        q.add_argument("--spect", default=None)
        q.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.out is None:
        args.out = f"expfam-out-{args.command}"
    try:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"--config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON ({exc})") from exc
        return args.fn(cfg, args)
    except CONFIG_FAILURES as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_FAILURES as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
