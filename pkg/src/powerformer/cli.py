"""Command-line entry point: ``python -m powerformer <command> ...``.

Commands: ``generate``, ``train``, ``evaluate``, ``solve``, ``bench``.
Option precedence is flag > ``--config`` JSON file > built-in default.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import (
    METRIC_COLUMNS,
    TrainConfig,
    build_network,
    evaluate,
    evaluate_random,
    export_embeddings,
    train,
)
from .bench import DEFAULT_SIZES, scaling_run
from .env import EnvConfig, SectionEnv, dump_scenarios, fit_scaler, generate_scenarios, parse_scenarios
from .errors import PowerformerError, ShapeMismatch
from .grid import builtin_case, load_case, load_section_config
from .nn import KINDS, PowerformerConfig, QNetwork
from .plot import line_plot_svg
from .powerflow import FeatureScaler, section_flow, solve_ac, solve_dc

BUILTIN_CASES = ("case9", "case30", "case118")
PAPER_INFERENCE = "0.078 +/- 0.151 s (118-bus reference)"

DEFAULTS = {
    "case": "case30",
    "sections": None,
    "scenarios": None,
    "seed": 0,
    "count": 200,
    "steps": 50_000,
    "network": "powerformer",
    "out": "runs/default",
    "checkpoint": None,
    "eval_interval": 1000,
    "smooth_window": 100,
    "strict_q": False,
    "w_ed": 0.1,
    "step_limit": 50,
    "d": 64,
    "layers": 2,
    "update_every": 1,
    "batch_size": 64,
    "lr": 1e-3,
    "eps_steps": 500_000,
    "record_time": False,
    "split": "test",
    "baseline": False,
    "workers": 1,
    "dc": False,
    "sizes": None,
    "repeats": 5,
}


class CliError(Exception):
    pass


# -- option plumbing -------------------------------------------------------------------


def _merge(args):
    """Resolve options: explicit flag, then config file, then default.

    Returns the merged options and the set of keys set by flag or config.
    """
    opts = dict(DEFAULTS)
    given = set()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"cannot read config file {args.config}: {err}") from None
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
        given.update(k.replace("-", "_") for k in loaded)
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            opts[k] = v
            given.add(k)
    return opts, given


def _resolve_case(spec):
    if spec in BUILTIN_CASES:
        return builtin_case(spec), spec
    path = Path(spec)
    if not path.exists():
        raise CliError(f"case file not found: {spec}")
    return load_case(path), str(path)


def _sections_text(spec, case_ref):
    if spec is None:
        if case_ref in BUILTIN_CASES:
            from importlib import resources

            return resources.files("powerformer.data").joinpath(f"{case_ref}.json").read_text()
        raise CliError("--sections is required for a non-built-in case")
    path = Path(spec)
    if not path.exists():
        raise CliError(f"section file not found: {spec}")
    return path.read_text()


def _load_scenarios(path):
    p = Path(path)
    if not p.exists():
        raise CliError(f"scenario file not found: {path}")
    return parse_scenarios(p.read_text())


def _env_config(opts):
    return EnvConfig(step_limit=int(opts["step_limit"]), w_ed=float(opts["w_ed"]), strict_q=bool(opts["strict_q"]))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else repr(v)
    return str(v)


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


# -- commands ------------------------------------------------------------------------------


def cmd_generate(opts):
    case, case_ref = _resolve_case(opts["case"])
    sections = load_section_config(_sections_text(opts["sections"], case_ref), case)
    scen = generate_scenarios(case, sections, int(opts["seed"]), int(opts["count"]))
    out = Path(opts["scenarios"] or Path(opts["out"]) / "scenarios.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dump_scenarios(scen, case_ref, int(opts["seed"])))
    n_test = sum(s.split == "test" for s in scen)
    print(f"wrote {len(scen)} scenarios to {out} (train {len(scen) - n_test}, test {n_test})")
    return 0


def _prepare(opts, case, case_ref, sections_text):
    sections = load_section_config(sections_text, case)
    if opts["scenarios"]:
        scen = _load_scenarios(opts["scenarios"])
    else:
        scen = generate_scenarios(case, sections, int(opts["seed"]), int(opts["count"]))
    return sections, scen


def cmd_train(opts):
    case, case_ref = _resolve_case(opts["case"])
    sections_text = _sections_text(opts["sections"], case_ref)
    sections, scen = _prepare(opts, case, case_ref, sections_text)
    train_set = [s for s in scen if s.split == "train"] or scen
    scaler = fit_scaler(case, sections, train_set)
    env_cfg = _env_config(opts)
    env = SectionEnv(case, sections, env_cfg, scaler)
    if opts["network"] not in KINDS:
        raise CliError(f"unknown network kind {opts['network']!r}; choose from {', '.join(KINDS)}")
    net = build_network(env, opts["network"], seed=int(opts["seed"]), d=int(opts["d"]), layers=int(opts["layers"]))
    cfg = TrainConfig(total_steps=int(opts["steps"]), seed=int(opts["seed"]), eval_interval=int(opts["eval_interval"]),
                      window=int(opts["smooth_window"]), update_every=int(opts["update_every"]),
                      batch_size=int(opts["batch_size"]), lr=float(opts["lr"]), eps_steps=int(opts["eps_steps"]),
                      record_time=bool(opts["record_time"]))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(opts["checkpoint"] or out / "model.ckpt")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({
        "network": net.config.to_dict(),
        "env": env_cfg.__dict__,
        "train": cfg.to_dict(),
        "case": case_ref,
        "sections": json.loads(sections_text),
        "scaler": scaler.to_dict(),
    }, sort_keys=True)

    def checkpoint(step, model, rows):
        ad.save_checkpoint(ckpt, model.store, meta)

    net, rows = train(env, train_set, cfg, net=net, on_interval=checkpoint)
    ad.save_checkpoint(ckpt, net.store, meta)
    (out / "metrics.csv").write_text(metrics_csv(rows))
    steps = [r.step for r in rows]
    rate = [r.trailing_success_rate for r in rows]
    svg = line_plot_svg({opts["network"]: (steps, rate)}, title=f"{opts['network']} on {Path(case_ref).stem}",
                        ylabel=f"success rate (%, trailing {cfg.window} episodes)", y_range=(0.0, 100.0))
    (out / "learning_curve.svg").write_text(svg)
    final = rows[-1].trailing_success_rate if rows else float("nan")
    print(f"trained {opts['network']} for {cfg.total_steps} steps; trailing success {final:.1f}%")
    print(f"wrote {ckpt}, {out / 'metrics.csv'}, {out / 'learning_curve.svg'}")
    return 0


def load_model(path):
    """Rebuild the network and run settings stored in a checkpoint."""
    p = Path(path)
    if not p.exists():
        raise CliError(f"checkpoint not found: {path}")
    state, meta_text = ad.read_checkpoint(p)
    try:
        meta = json.loads(meta_text)
        net = QNetwork(PowerformerConfig.from_dict(meta["network"]))
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise CliError(f"checkpoint {path} has unusable metadata: {err}") from None
    net.store.load_state_dict(state)
    return net, meta


def cmd_evaluate(opts, given):
    net, meta = load_model(opts["checkpoint"] or Path(opts["out"]) / "model.ckpt")
    case_spec = opts["case"] if "case" in given else meta.get("case", opts["case"])
    case, case_ref = _resolve_case(case_spec)
    if "sections" in given:
        sections_text = _sections_text(opts["sections"], case_ref)
    else:
        sections_text = json.dumps(meta["sections"])
    sections, scen = _prepare(opts, case, case_ref, sections_text)
    if opts["split"] != "all":
        scen = [s for s in scen if s.split == opts["split"]]
    if not scen:
        raise CliError(f"no scenarios in split {opts['split']!r}")
    env_cfg = EnvConfig(**meta["env"])
    for key in ("step_limit", "w_ed", "strict_q"):
        if key in given:
            setattr(env_cfg, key, _env_config(opts).__dict__[key])
    scaler = FeatureScaler.from_dict(meta["scaler"])
    env = SectionEnv(case, sections, env_cfg, scaler)
    if net.config.n_actions != env.n_actions or net.config.zdim != env.zdim:
        raise ShapeMismatch(
            f"checkpoint expects {net.config.n_actions} actions / zdim {net.config.zdim}, "
            f"case gives {env.n_actions} / {env.zdim}")

    def factory():
        return SectionEnv(case, sections, env_cfg, scaler)

    report = evaluate(net, factory, scen, workers=int(opts["workers"]))
    baseline = evaluate_random(factory, scen, seed=int(opts["seed"])) if opts["baseline"] else None
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report, meta, baseline))
    (out / "episodes.csv").write_text(episodes_csv(report))
    ids, secs, emb = export_embeddings(net, env, scen)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "section"] + [f"e{i}" for i in range(emb.shape[1])])
    for i, s, row in zip(ids, secs, emb):
        w.writerow([int(i), int(s)] + [repr(float(v)) for v in row])
    (out / "embeddings.csv").write_text(buf.getvalue())
    print(f"success {report.success_rate:.2f}%  mean cost {report.mean_cost:.2f} $  "
          f"inference {report.inference_mean:.4f} +/- {report.inference_std:.4f} s")
    if baseline is not None:
        print(f"random policy success {baseline.success_rate:.2f}%")
    print(f"wrote {out / 'report.txt'}, {out / 'episodes.csv'}, {out / 'embeddings.csv'}")
    return 0


def format_report(report, meta, baseline=None):
    lines = [
        f"# evaluation report, generated {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        f"network: {meta['network']['kind']}",
        f"case: {meta.get('case', '?')}",
        f"scenarios: {len(report.episodes)}",
        f"success_rate_percent: {report.success_rate:.4f}",
        f"mean_economic_cost: {report.mean_cost:.4f}",
        f"inference_seconds_mean: {report.inference_mean:.6f}",
        f"inference_seconds_std: {report.inference_std:.6f}",
        f"solver_seconds_mean: {report.solver_mean:.6f}",
        f"reference_inference: {PAPER_INFERENCE}",
    ]
    if baseline is not None:
        lines.append(f"random_policy_success_rate_percent: {baseline.success_rate:.4f}")
    lines.append("per_section:")
    for sid, row in report.per_section().items():
        lines.append(f"  section {sid}: scenarios {row['scenarios']}, success {row['success_rate']:.4f}%, "
                     f"mean cost {row['mean_cost']:.4f}")
    return "\n".join(lines) + "\n"


def episodes_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("scenario", "section", "outcome", "steps", "cost", "initial_flow", "final_flow",
            "inference_seconds", "solver_seconds")
    w.writerow(cols)
    for e in report.episodes:
        w.writerow([_fmt(getattr(e, c)) for c in cols])
    return buf.getvalue()


def cmd_solve(opts):
    case, case_ref = _resolve_case(opts["case"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    if opts["dc"]:
        sol = solve_dc(case)
        print(f"DC power flow on {case_ref}")
    else:
        sol = solve_ac(case)
        print(f"AC power flow on {case_ref}: {sol.iterations} iterations, max mismatch {sol.max_mismatch:.3e} p.u.")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "vm", "va_deg", "p_inj_mw", "q_inj_mvar"])
    for i in range(case.n_bus):
        w.writerow([int(case.bus_id[i]), repr(float(sol.vm[i])), repr(float(np.degrees(sol.va[i]))),
                    repr(float(sol.p_inj[i])), repr(float(sol.q_inj[i]))])
    (out / "buses.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from", "to", "p_mw", "q_mvar"])
    for k in range(case.n_branch):
        w.writerow([int(case.f_bus[k]), int(case.t_bus[k]), repr(float(sol.branch_p[k])), repr(float(sol.branch_q[k]))])
    (out / "branches.csv").write_text(buf.getvalue())
    if opts["sections"] is not None or case_ref in BUILTIN_CASES:
        try:
            sections = load_section_config(_sections_text(opts["sections"], case_ref), case)
        except (CliError, FileNotFoundError):
            sections = []
        for s in sections:
            f = section_flow(sol, s, bool(opts["strict_q"]))
            state = "inside" if f.within_p_bounds else "OUTSIDE"
            print(f"section {s.id}: P = {f.p:.2f} MW, bounds [{s.p_min:g}, {s.p_max:g}] -> {state}")
    print(f"wrote {out / 'buses.csv'}, {out / 'branches.csv'}")
    return 0


def cmd_bench(opts):
    sizes = [int(s) for s in opts["sizes"].split(",")] if opts["sizes"] else list(DEFAULT_SIZES)
    ns, times, exponent, _ = scaling_run(sizes, kind=opts["network"], d=int(opts["d"]),
                                         repeats=int(opts["repeats"]), seed=int(opts["seed"]))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = "n,seconds\n" + "".join(f"{n},{t!r}\n" for n, t in zip(ns, times))
    (out / "scaling.csv").write_text(rows)
    for n, t in zip(ns, times):
        print(f"n={n:5d}  forward {t * 1e3:8.3f} ms")
    print(f"fitted exponent {exponent:.3f}")
    return 0


# -- parser -------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="powerformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of option values (flags take precedence)")
        sp.add_argument("--case", help="MATPOWER .m file or built-in name (case9, case30, case118)")
        sp.add_argument("--sections", help="section JSON file (defaults to the built-in set for built-in cases)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    def env_flags(sp):
        sp.add_argument("--scenarios", help="scenario file (generated on the fly when omitted)")
        sp.add_argument("--count", type=int, help="scenarios to generate when --scenarios is omitted")
        sp.add_argument("--strict-q", action="store_const", const=True, dest="strict_q",
                        help="also require the reactive section bounds")
        sp.add_argument("--w-ed", type=float, dest="w_ed", help="economic reward weight")
        sp.add_argument("--step-limit", type=int, dest="step_limit", help="episode step limit")

    g = sub.add_parser("generate", help="draw insecure scenarios and write a scenario file")
    common(g)
    g.add_argument("--scenarios", help="output scenario file (default OUT/scenarios.txt)")
    g.add_argument("--count", type=int)

    t = sub.add_parser("train", help="train a Dueling DQN policy")
    common(t)
    env_flags(t)
    t.add_argument("--steps", type=int, help="environment steps")
    t.add_argument("--network", choices=KINDS)
    t.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    t.add_argument("--eval-interval", type=int, dest="eval_interval", help="steps per metrics row and checkpoint")
    t.add_argument("--smooth-window", type=int, dest="smooth_window", help="episodes in the trailing success rate")
    t.add_argument("--d", type=int, help="hidden width")
    t.add_argument("--layers", type=int)
    t.add_argument("--update-every", type=int, dest="update_every", help="environment steps per gradient update")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--eps-steps", type=int, dest="eps_steps", help="epsilon decay horizon")
    t.add_argument("--record-time", action="store_const", const=True, dest="record_time",
                   help="fill the wall_seconds metrics column (breaks byte-identical reruns)")

    e = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    common(e)
    env_flags(e)
    e.add_argument("--checkpoint", help="checkpoint to load (default OUT/model.ckpt)")
    e.add_argument("--split", choices=("train", "test", "all"))
    e.add_argument("--baseline", action="store_const", const=True, help="also score a uniform-random policy")
    e.add_argument("--workers", type=int, help="evaluation threads")

    s = sub.add_parser("solve", help="run one power flow and write bus/branch CSVs")
    common(s)
    s.add_argument("--dc", action="store_const", const=True, help="DC approximation instead of AC")
    s.add_argument("--strict-q", action="store_const", const=True, dest="strict_q")

    b = sub.add_parser("bench", help="forward-pass time versus graph size")
    common(b)
    b.add_argument("--network", choices=KINDS)
    b.add_argument("--d", type=int)
    b.add_argument("--sizes", help="comma-separated node counts")
    b.add_argument("--repeats", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts, given = _merge(args)
        if args.command == "generate":
            return cmd_generate(opts)
        if args.command == "train":
            return cmd_train(opts)
        if args.command == "evaluate":
            return cmd_evaluate(opts, given)
        if args.command == "solve":
            return cmd_solve(opts)
        return cmd_bench(opts)
    except (PowerformerError, CliError, ValueError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
