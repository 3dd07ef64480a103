"""Command-line front end: train | eval | tune | sweep | export.

Configuration comes from an optional INI file (``--config``) whose values
are overridden by command-line flags.  Exit codes: 0 success, 2
configuration error, 1 runtime failure.
"""
import argparse
import configparser
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field, replace

from . import policy as P
from .control import Baseline, PolicyController
from .derived import (GridSpec, TunedEntry, default_grid, derived_for, grid_search, make_derived,
                      write_tuned)
from .env.core import EnvConfig, Objective
from .evaluate import (IDM_TABLE, EvalConfig, MetricsReport, Trace, evaluate, export_timespace,
                       run_episode, sweep_idm)
from .sim.network import System
from .sim.params import ConfigurationError
from .train import TrainConfig, TrpoConfig, train

OUT_ENV = "MIXTRAFFIC_OUT"
COMMANDS = ("train", "eval", "tune", "sweep", "export")

DEFAULT_DENSITIES = {
    System.SINGLE_RING: "230,240,250,260,270",
    System.DOUBLE_RING: "240,250,260",
    System.FIGURE_EIGHT: "30",
    System.BOTTLENECK: "2600",
    System.RAMP: "2000",
    System.INTERSECTION: "700/700",
}


class UsageError(ConfigurationError):
    pass


@dataclass
class RunConfig:
    command: str
    system: System
    densities: list
    objective: Objective | None = None
    controller: str = "baseline"
    seed: int = 0
    out: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: str | None = None

    def env_configs(self) -> list:
        return [EnvConfig(self.system, d, objective=self.objective) for d in self.densities]


def parse_densities(text: str) -> list:
    """"250,260" -> [(250,), (260,)]; "700/700,850/700" -> [(700, 700), (850, 700)]."""
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        try:
            out.append(tuple(float(x) for x in item.split("/")))
        except ValueError:
            raise ConfigurationError(f"bad density {item!r}") from None
    if not out:
        raise ConfigurationError("no density given")
    return out


def parse_grid(text: str) -> GridSpec:
    """"x1=40,60;x2=60,80" -> GridSpec."""
    names, cands = [], []
    for part in text.split(";"):
        if not part.strip():
            continue
        name, _, vals = part.partition("=")
        try:
            cands.append(tuple(float(v) for v in vals.split(",") if v.strip()))
        except ValueError:
            raise ConfigurationError(f"bad grid entry {part!r}") from None
        names.append(name.strip())
    return GridSpec(tuple(names), tuple(cands))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixtraffic", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI file with [run], [train] and [eval] sections")
    p.add_argument("--system", help="single_ring, double_ring, figure_eight, bottleneck, ramp, intersection")
    p.add_argument("--density", help="comma-separated densities; pairs as FH/FV")
    p.add_argument("--objective", help="global, greedy or outflow")
    p.add_argument("--controller", help="baseline, derived, or a checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="number of evaluation seeds")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta-kl", type=float)
    p.add_argument("--iterations", type=int, help="gradient steps G")
    p.add_argument("--batch", type=int, help="trajectories per step B")
    p.add_argument("--fvp-subsample", type=int,
                   help="use every k-th transition in Fisher-vector products")
    p.add_argument("--h0", type=int, help="warmup steps")
    p.add_argument("--h1", type=int, help="settling steps")
    p.add_argument("--h", type=int, help="measured steps")
    p.add_argument("--grid", help="tuning grid, e.g. 'x1=40,60;x2=60,80'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _read_ini(path) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigurationError(f"cannot read config file {path}")
    known = {"run", "train", "eval"}
    bad = set(cp.sections()) - known
    if bad:
        raise ConfigurationError(f"unknown config sections {sorted(bad)}")
    return {s: dict(cp.items(s)) for s in cp.sections()}


def _get(args, ini, section, key, attr=None, cast=str):
    v = getattr(args, attr or key, None)
    if v is not None:
        return v
    raw = ini.get(section, {}).get(key)
    if raw is None:
        return None
    try:
        return cast(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {section}.{key}: {raw!r}") from None


def resolve(args) -> RunConfig:
    ini = _read_ini(args.config) if args.config else {}
    system = _get(args, ini, "run", "system")
    if system is None:
        raise UsageError("--system is required")
    system = System.parse(system)
    dens = _get(args, ini, "run", "density") or DEFAULT_DENSITIES[system]
    objective = _get(args, ini, "run", "objective")
    seed = _get(args, ini, "run", "seed", cast=int)
    seed = 0 if seed is None else seed
    out = _get(args, ini, "run", "out") or os.environ.get(OUT_ENV) or "runs"
    tr = TrainConfig()
    tvals = {
        "G": _get(args, ini, "train", "iterations", cast=int),
        "B": _get(args, ini, "train", "batch", cast=int),
        "gamma": _get(args, ini, "train", "gamma", cast=float),
    }
    tr = replace(tr, seed=seed, **{k: v for k, v in tvals.items() if v is not None})
    dkl = _get(args, ini, "train", "delta_kl", attr="delta_kl", cast=float)
    if dkl is not None:
        tr = replace(tr, trpo=replace(tr.trpo, delta_kl=dkl))
    sub = _get(args, ini, "train", "fvp_subsample", attr="fvp_subsample", cast=int)
    if sub is not None:
        tr = replace(tr, trpo=replace(tr.trpo, fvp_subsample=sub))
    ev = EvalConfig(seed=seed)
    evals = {
        "n_seeds": _get(args, ini, "eval", "seeds", cast=int),
        "h0": _get(args, ini, "eval", "h0", cast=int),
        "h1": _get(args, ini, "eval", "h1", cast=int),
        "h": _get(args, ini, "eval", "h", cast=int),
    }
    ev = replace(ev, **{k: v for k, v in evals.items() if v is not None})
    return RunConfig(
        command=args.command, system=system, densities=parse_densities(dens),
        objective=None if objective is None else Objective.parse(objective),
        controller=_get(args, ini, "run", "controller") or "baseline", seed=seed, out=out,
        train=tr, eval=ev, grid=_get(args, ini, "run", "grid"),
    )


def make_controller(spec: str, cfg: EnvConfig):
    if spec == "baseline":
        return Baseline(), "baseline"
    if spec == "derived":
        return derived_for(cfg), "derived"
    if not os.path.exists(spec):
        raise ConfigurationError(f"controller must be baseline, derived or a checkpoint path: {spec!r}")
    params, scale, _ = P.load_checkpoint(spec)
    return PolicyController(params, scale), "policy"


def _write(path, text) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def cmd_eval(rc: RunConfig) -> None:
    cfgs = rc.env_configs()
    entries, name = [], "baseline"
    for c in cfgs:
        ctrl, name = make_controller(rc.controller, c)
        entries.append(evaluate(ctrl, c, rc.eval))
    report = MetricsReport(rc.system.value, name, cfgs[0].objective.value,
                           rc.eval.windows(cfgs[0].dt), entries)
    _write(os.path.join(rc.out, "metrics.json"), report.to_json())
    _write(os.path.join(rc.out, "metrics.csv"), report.to_csv())
    for e in entries:
        print(f"{'/'.join(f'{x:g}' for x in e.density)}\t{e.metric}\t{e.mean:.4f}\t+- {e.std:.4f}")


def cmd_train(rc: RunConfig) -> None:
    out = os.path.join(rc.out, "train")
    res = train(rc.env_configs(), rc.train, out_dir=out)
    if res.log:
        best = res.best_index
        shutil.copyfile(res.paths[best], os.path.join(out, "best.npz"))
        _write(os.path.join(out, "best.json"),
               json.dumps({"iteration": best, "mean_objective": res.log[best].mean_objective}) + "\n")
        print(f"best checkpoint: iteration {best} ({res.log[best].mean_objective:.4f})")
    else:
        shutil.copyfile(res.paths[0], os.path.join(out, "best.npz"))
        print("no training iterations; initial checkpoint written")


def cmd_tune(rc: RunConfig) -> None:
    entries, tables = [], []
    for c in rc.env_configs():
        grid = parse_grid(rc.grid) if rc.grid else default_grid(c.system)
        grid = replace(grid, n_seeds=rc.eval.n_seeds)

        def score(ctrl, c=c):
            m = evaluate(ctrl, c, rc.eval)
            return m.values

        res = grid_search(lambda pt, c=c: make_derived(c.system, pt), grid, score)
        std = next(s for pt, m, s in res.table if pt == res.best)
        entries.append(TunedEntry(c.system.value, c.density_param, res.best, res.best_score, std))
        for pt, m, s in res.table:
            tables.append((c.density_param, pt, m, s))
        print(f"{'/'.join(f'{x:g}' for x in c.density_param)}\t{res.best}\t{res.best_score:.4f}")
    os.makedirs(rc.out, exist_ok=True)
    write_tuned(os.path.join(rc.out, "tuned_params.csv"), entries)
    lines = ["density,params,mean_score,std"]
    for d, pt, m, s in tables:
        lines.append(f"{'/'.join(f'{x:g}' for x in d)},\"{json.dumps(pt, sort_keys=True)}\",{m:.6g},{s:.6g}")
    _write(os.path.join(rc.out, "grid_scores.csv"), "\n".join(lines) + "\n")


def cmd_sweep(rc: RunConfig) -> None:
    c = rc.env_configs()[0]
    derived = derived_for(c)
    rows = sweep_idm(c, derived, IDM_TABLE, rc.eval)
    lines = ["parameter,value,controller,mean,std"]
    for key, v, label, m, s in rows:
        val = "/".join(f"{x:g}" for x in v) if isinstance(v, tuple) else f"{v:g}"
        lines.append(f"\"{key}\",{val},{label},{m:.6g},{s:.6g}")
        print(f"{key}={val}\t{label}\t{m:.1f} +- {s:.1f}")
    _write(os.path.join(rc.out, "idm_sweep.csv"), "\n".join(lines) + "\n")


def cmd_export(rc: RunConfig) -> None:
    c = rc.env_configs()[0]
    ctrl, _ = make_controller(rc.controller, c)
    h0, h1, h = rc.eval.windows(c.dt)
    trace = Trace()
    run_episode(ctrl, c, rc.seed, h0, h1, h, trace=trace)
    path = os.path.join(rc.out, "timespace.csv")
    os.makedirs(rc.out, exist_ok=True)
    export_timespace(trace, path)
    print(path)


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "tune": cmd_tune, "sweep": cmd_sweep,
            "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        HANDLERS[rc.command](rc)
    except ConfigurationError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
