"""Command-line front end: ``misivqr <command> [flags]``.

Every command writes its results plus a run manifest recording the
command, the fully resolved settings, the seed and the package version.
``misivqr replay MANIFEST`` re-executes a manifest and checks that the
outputs are byte-identical.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bounds import attenuation_kappa
from .dgp import Dataset, QuantileFamily, StructuralModel, population_joint, sample_dataset
from .errors import ConfigError, ConstructionError, DomainError, EstimationError
from .identify import construct_perturbation, identified_set, verify_observational_equivalence
from .inference import InferenceConfig, confidence_interval
from .moments import build_moment_spec
from .montecarlo import DESIGNS, run_coverage

log = logging.getLogger("misivqr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# settings that never change results and are kept out of the manifest
_RUNTIME_KEYS = {"command", "config", "threads", "func", "verbose"}
# output destinations are recorded but do not enter the manifest hash
_OUTPUT_KEYS = {"out", "csv", "json"}


class UsageError(Exception):
    pass


# argument parsing


def _model_flags(p, family_default=None):
    g = p.add_argument_group("model")
    g.add_argument("--design", type=int, choices=sorted(DESIGNS), help="start from a simulation design")
    g.add_argument("--family", choices=["sqrt_linear", "square", "affine"], default=family_default)
    g.add_argument("--a", type=float, help="affine family: q(1, u) = a + b u")
    g.add_argument("--b", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--p0", type=float)
    g.add_argument("--p1", type=float)


def _inference_flags(p):
    g = p.add_argument_group("inference")
    g.add_argument("--alpha", type=float, default=0.10)
    g.add_argument("--B", dest="n_bootstrap", type=int, default=500)
    g.add_argument("--kappa", type=float, help="GMS threshold (default sqrt(ln n))")
    g.add_argument("--theta-grid", type=float, nargs=3, metavar=("LO", "HI", "STEP"), default=[-0.2, 0.8, 0.02])
    g.add_argument("--n-bins", type=int, default=4)
    g.add_argument("--refine-rounds", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misivqr", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, help="worker processes (default: $MISIVQR_THREADS or all cores)")
    parser.add_argument("--config", help="JSON file of flag values; explicit flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset")
    _model_flags(p)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("population", help="population effects and identified interval")
    _model_flags(p)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--grid-step", type=float, default=0.005)
    p.add_argument("--out")
    p.set_defaults(func=cmd_population)

    p = sub.add_parser("identify", help="population identified set on a grid")
    _model_flags(p)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--grid-step", type=float, default=0.005)
    p.add_argument("--out")
    p.add_argument("--csv", help="also write the feasible grid points")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("infer", help="confidence set for theta from a dataset CSV")
    p.add_argument("--data")
    p.add_argument("--tau", type=float, default=0.5)
    _inference_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--csv", help="also write per-theta test results")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("coverage", help="Monte Carlo coverage curve")
    p.add_argument("--design", type=int, choices=sorted(DESIGNS))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--thetas", type=float, nargs="+", help="explicit theta values instead of --theta-grid")
    _inference_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--json", help="also write a JSON summary")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("perturb", help="observationally equivalent perturbation")
    _model_flags(p, family_default=None)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--d-bar", type=int, choices=[0, 1], default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="write regenerated outputs here instead of over the originals")
    p.set_defaults(func=cmd_replay)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known - _RUNTIME_KEYS
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k in known})
        args = parser.parse_args(argv)
    return args


# helpers


def resolve_model(args, defaults=None) -> StructuralModel:
    """Model from ``--design`` (if any) overridden by explicit flags."""
    base = dict(family="sqrt_linear", a=None, b=None, rho=0.0, gamma=0.25, p0=0.25, p1=0.25)
    base.update(defaults or {})
    if getattr(args, "design", None) is not None:
        d = DESIGNS[args.design]
        base.update(family="sqrt_linear", rho=d.rho, gamma=d.gamma, p0=d.p0, p1=d.p1)
    for key in ("family", "a", "b", "rho", "gamma", "p0", "p1"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    fam = base["family"]
    if fam == "affine":
        if base["a"] is None or base["b"] is None:
            raise UsageError("--family affine needs --a and --b")
        family = QuantileFamily.affine(base["a"], base["b"])
    elif base["a"] is not None or base["b"] is not None:
        raise UsageError("--a/--b only apply to --family affine")
    else:
        family = getattr(QuantileFamily, fam)()
    return StructuralModel(family, base["rho"], base["gamma"], (0.0, 1.0), (0.5, 0.5), base["p0"], base["p1"])


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _inference_config(args, seed) -> InferenceConfig:
    return InferenceConfig(alpha=args.alpha, n_bootstrap=args.n_bootstrap, kappa=args.kappa,
                           theta_grid=tuple(args.theta_grid), n_bins=args.n_bins,
                           refine_rounds=args.refine_rounds, seed=seed)


def run_settings(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _RUNTIME_KEYS}


def manifest_hash(command: str, settings: dict, inputs: dict | None = None) -> str:
    """Digest of everything that determines a command's results."""
    kept = {k: v for k, v in settings.items() if k not in _OUTPUT_KEYS}
    payload = {"command": command, "settings": kept, "inputs": sorted((inputs or {}).values()),
               "version": __version__}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, args, inputs=()):
        self.command = args.command
        self.settings = run_settings(args)
        self.inputs = {str(p): _sha256(p) for p in inputs}
        self.hash = manifest_hash(self.command, self.settings, self.inputs)
        self.outputs = []

    def json(self, obj: dict, path):
        obj = {**obj, "manifest_hash": self.hash}
        _dump_json(obj, path)
        if path is not None:
            self.outputs.append(str(path))

    def file(self, path):
        self.outputs.append(str(path))

    def finish(self):
        if not self.outputs:
            return None
        manifest = {
            "command": self.command,
            "settings": self.settings,
            "seed": self.settings.get("seed"),
            "version": __version__,
            "inputs": self.inputs,
            "outputs": {p: _sha256(p) for p in self.outputs},
            "manifest_hash": self.hash,
        }
        path = Path(self.outputs[0] + ".manifest.json")
        _dump_json(manifest, path)
        log.info("manifest written to %s", path)
        return path


# commands


def cmd_simulate(args):
    _require(args, "n", "seed", "out")
    model = resolve_model(args)
    data = sample_dataset(model, args.n, args.seed)
    run = Run(args)
    data.to_csv(args.out)
    run.file(args.out)
    return run


def _population_record(model, tau, grid_step):
    rep = attenuation_kappa(model, tau)
    ident = identified_set(population_joint(model), tau, grid_step=grid_step)
    return rep, ident


def cmd_population(args):
    model = resolve_model(args)
    rep, ident = _population_record(model, args.tau, args.grid_step)
    run = Run(args)
    out = {"design": args.design, "tau": args.tau, "model": model.to_dict(), **rep.to_dict(),
           "identified_set": None if ident.empty else list(ident.theta_interval)}
    run.json(out, args.out)
    return run


def cmd_identify(args):
    model = resolve_model(args)
    ident = identified_set(population_joint(model), args.tau, grid_step=args.grid_step)
    run = Run(args)
    run.json({"model": model.to_dict(), **ident.to_dict()}, args.out)
    if args.csv:
        ident.write_csv(args.csv)
        run.file(args.csv)
    return run


def cmd_infer(args):
    _require(args, "data", "seed")
    if not Path(args.data).is_file():
        raise UsageError(f"data file {args.data} does not exist")
    data = Dataset.from_csv(args.data)
    config = _inference_config(args, args.seed)
    spec = build_moment_spec(data, args.tau, config.n_bins)
    cs = confidence_interval(data, spec, config)
    run = Run(args, inputs=[args.data])
    run.json({"data": args.data, "n": data.n, "tau": args.tau, **cs.to_dict()}, args.out)
    if args.csv:
        cs.write_csv(args.csv)
        run.file(args.csv)
    return run


def _threads(args) -> int:
    if args.threads is not None:
        k = args.threads
    elif os.environ.get("MISIVQR_THREADS"):
        try:
            k = int(os.environ["MISIVQR_THREADS"])
        except ValueError:
            raise UsageError("MISIVQR_THREADS must be an integer") from None
    else:
        k = os.cpu_count() or 1
    if k < 1:
        raise UsageError(f"thread count must be >= 1, got {k}")
    return k


def cmd_coverage(args):
    _require(args, "design", "seed", "out")
    config = _inference_config(args, 0)
    curve = run_coverage(args.design, args.n, args.reps, args.thetas, config, seed=args.seed,
                         workers=_threads(args))
    run = Run(args)
    curve.write_csv(args.out)
    run.file(args.out)
    if args.json:
        run.json(curve.to_dict(), args.json)
    return run


def cmd_perturb(args):
    model = resolve_model(args, defaults={"family": "square"})
    pert = construct_perturbation(model, args.eps, d_bar=args.d_bar, tau=args.tau)
    dist = verify_observational_equivalence(model, pert)
    fam = model.q_family
    q_orig = float(fam.quantile(args.d_bar, args.tau))
    q_new = float(pert.q_tilde(args.d_bar, args.tau))
    run = Run(args)
    run.json({
        "model": model.to_dict(), "epsilon": args.eps, "d_bar": args.d_bar, "tau": args.tau,
        "p_original": [model.p0, model.p1], "p_tilde": list(pert.p_tilde),
        "q_original": q_orig, "q_tilde": q_new, "q_shift": q_new - q_orig,
        "theta_original": float(fam.quantile(1, args.tau) - fam.quantile(0, args.tau)),
        "theta_tilde": float(pert.q_tilde(1, args.tau) - pert.q_tilde(0, args.tau)),
        "sup_distance": dist,
    }, args.out)
    return run


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = settings_to_argv(manifest["command"], manifest["settings"])
    originals = manifest["outputs"]
    mapping = {}
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        mapping = {p: str(Path(args.out_dir) / Path(p).name) for p in originals}
        argv = [mapping.get(a, a) for a in argv]
    replayed = main(argv, _return_run=True)
    if not isinstance(replayed, Run):
        raise EstimationError(f"replayed command exited with status {replayed}")
    report = {}
    for p, digest in originals.items():
        new = mapping.get(p, p)
        report[p] = {"path": new, "identical": _sha256(new) == digest}
    sys.stdout.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
    if not all(r["identical"] for r in report.values()):
        raise EstimationError("replayed outputs differ from the manifest")
    return None


def settings_to_argv(command: str, settings: dict) -> list[str]:
    """Flags that reproduce ``settings`` for ``command``."""
    sub = _subparser(build_parser(), command)
    flags = {a.dest: a for a in sub._actions if a.option_strings}
    argv = [command]
    for key, val in settings.items():
        if val is None or key not in flags:
            continue
        opt = max(flags[key].option_strings, key=len)
        argv.append(opt)
        if isinstance(val, list):
            argv.extend(str(v) for v in val)
        else:
            argv.append(str(val))
    return argv


def main(argv=None, _return_run: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if exc.code is not None else EXIT_OK
    except UsageError as exc:
        print(f"misivqr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = args.func(args)
        if isinstance(run, Run):
            run.finish()
    except (UsageError, DomainError, ConfigError, FileNotFoundError) as exc:
        print(f"misivqr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, ConstructionError, FloatingPointError) as exc:
        print(f"misivqr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if _return_run:
        return run
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
