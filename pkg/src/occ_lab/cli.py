"""occ-lab command line: train | compare | analyze | sweep.

Exit codes: 0 success, 1 usage/config error, 2 runtime abort (non-finite
gradients; partial records are flushed before exiting).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import (
    ConfigError,
    build_train_config,
    config_to_flat,
    parse_config_file,
    parse_overrides,
    parse_value,
)
from .runio import (
    AnalysisError,
    emit_decomposition,
    emit_fidelity,
    emit_parabola,
    emit_transition,
    read_manifest,
    read_steps_csv,
    run_id_for,
    save_run,
    step_events,
    utc_now,
    write_comparison,
    write_csv,
)
from .trainer import (
    NonFiniteGradientError,
    Regime,
    RegimeConfig,
    compare_regimes,
    run_experiment,
)

ANALYSES = ("decomposition", "parabola", "fidelity", "transition")


def _load_config(args):
    flat, lines = parse_config_file(args.config)
    flat.update(parse_overrides(args.set or []))
    if getattr(args, "seed", None) is not None:
        flat["train.seed"] = args.seed
    return build_train_config(flat, path=str(args.config), lines=lines)


def _run_and_persist(flat: dict, out_dir: str) -> tuple[list, str, str]:
    """Run one experiment, write its run directory, return (records, status, dir)."""
    cfg = build_train_config(flat)
    records: list = []
    status = "ok"
    started = utc_now()
    try:
        run_experiment(cfg, on_step=lambda state, rec: records.append(rec))
    except NonFiniteGradientError as exc:
        status = f"aborted: {exc}"
    events = step_events(records)
    if status != "ok":
        events.append({"event": "abort", "detail": status})
    run_dir = save_run(Path(out_dir), run_id_for(flat), flat, records, events,
                       started, status)
    return records, status, str(run_dir)


def _run_and_persist_star(payload):
    return _run_and_persist(*payload)


def _run_cells(configs, out_dir: Path, jobs: int):
    payloads = [(config_to_flat(cfg), str(out_dir)) for cfg in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_and_persist_star, payloads))
    return [_run_and_persist(*p) for p in payloads]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, status, run_dir = _run_and_persist(config_to_flat(cfg), args.out)
    print(run_dir)
    if status != "ok":
        print(f"occ-lab: {status}", file=sys.stderr)
        return 2
    return 0


def _parse_regimes(names: list[str], base) -> list[RegimeConfig]:
    out = []
    for name in names:
        try:
            kind = Regime(name)
        except ValueError:
            raise ConfigError(f"unknown regime {name!r}; choose from "
                              f"{[r.value for r in Regime]}") from None
        out.append(replace(base.regime, kind=kind))
    return out


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    regimes = _parse_regimes(args.regimes.split(","), cfg)
    if len(regimes) < 2:
        raise ConfigError("compare needs at least 2 regimes")
    out = Path(args.out)
    statuses: list[str] = []

    def runner(configs):
        results = _run_cells(list(configs), out / "runs", args.jobs)
        statuses.extend(status for _, status, _ in results)
        return [records for records, _, _ in results]

    report = compare_regimes(cfg, regimes, seeds, final_window=args.final_window,
                             runner=runner)
    write_comparison(out, report)
    print(out / "summary.csv")
    bad = [s for s in statuses if s != "ok"]
    if bad:
        print(f"occ-lab: {len(bad)} cell(s) aborted: {bad[0]}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    flat_base, lines = parse_config_file(args.config)
    flat_base.update(parse_overrides(args.set or []))
    seeds = [int(s) for s in args.seeds.split(",")]
    values = args.values.split(",")
    out = Path(args.out)
    cells = []
    for value in values:
        for seed in seeds:
            flat = dict(flat_base)
            flat[args.param] = parse_value(value)
            flat["train.seed"] = seed
            cells.append((value, seed, flat))
    configs = [build_train_config(flat, path=str(args.config), lines=lines)
               for _, _, flat in cells]
    results = _run_cells(configs, out / "runs", args.jobs)
    rows = []
    window = args.final_window
    for (value, seed, _), (records, _, _) in zip(cells, results):
        tail = records[-window:]
        final = sum(r.mean_reward for r in tail) / len(tail) if tail else None
        rows.append([str(value), seed, final])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", [args.param, "seed", "final_reward"], rows)
    print(out / "sweep.csv")
    bad = [s for _, s, _ in results if s != "ok"]
    if bad:
        print(f"occ-lab: {len(bad)} cell(s) aborted: {bad[0]}", file=sys.stderr)
        return 2
    return 0


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    steps_path = run_dir / "steps.csv"
    manifest_path = run_dir / "manifest.json"
    if not steps_path.is_file() or not manifest_path.is_file():
        raise ConfigError(f"not a run directory (missing steps.csv/manifest.json): {run_dir}")
    rows = read_steps_csv(steps_path)
    manifest = read_manifest(manifest_path)
    eta = float(manifest["config"]["train.eta"])
    out = Path(args.out) if args.out else run_dir
    analysis_dir = out / "analysis"
    analysis_dir.mkdir(parents=True, exist_ok=True)
    wanted = args.analyses.split(",") if args.analyses else list(ANALYSES)
    for name in wanted:
        if name not in ANALYSES:
            raise ConfigError(f"unknown analysis {name!r}; choose from {ANALYSES}")
        if name == "decomposition":
            emit_decomposition(rows, analysis_dir / "decomposition.csv")
        elif name == "parabola":
            emit_parabola(rows, eta, analysis_dir / "parabola.csv")
        elif name == "fidelity":
            emit_fidelity(rows, analysis_dir / "fidelity.csv",
                          analysis_dir / "fidelity_summary.csv")
        else:
            emit_transition(rows, eta, args.lambda_probe, analysis_dir / "transition.csv")
    print(analysis_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occ-lab")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training experiment")
    train.add_argument("--config", required=True)
    train.add_argument("--set", action="append", metavar="KEY=VALUE")
    train.add_argument("--out", default="runs")
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(func=cmd_train)

    compare = sub.add_parser("compare", help="compare regimes across seeds")
    compare.add_argument("--config", required=True)
    compare.add_argument("--set", action="append", metavar="KEY=VALUE")
    compare.add_argument("--out", default="compare_out")
    compare.add_argument("--regimes", required=True,
                         help="comma-separated regime kinds")
    compare.add_argument("--seeds", default="0,1,2")
    compare.add_argument("--final-window", type=int, default=20)
    compare.add_argument("--jobs", type=int, default=1)
    compare.set_defaults(func=cmd_compare)

    sweep = sub.add_parser("sweep", help="sweep one config key across values")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep.add_argument("--out", default="sweep_out")
    sweep.add_argument("--param", required=True, help="flat config key to sweep")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--seeds", default="0,1,2")
    sweep.add_argument("--final-window", type=int, default=20)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.set_defaults(func=cmd_sweep)

    analyze = sub.add_parser("analyze", help="emit plot-data CSVs from a run")
    analyze.add_argument("run_dir")
    analyze.add_argument("--analyses", default=None,
                         help=f"comma-separated subset of {','.join(ANALYSES)}")
    analyze.add_argument("--out", default=None)
    analyze.add_argument("--lambda-probe", type=float, default=1.0)
    analyze.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AnalysisError) as exc:
        print(f"occ-lab: {exc}", file=sys.stderr)
        return 1
    except NonFiniteGradientError as exc:
        print(f"occ-lab: aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
