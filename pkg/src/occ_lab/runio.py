"""Run persistence: manifests, step CSVs, event logs, and analysis emission.

Numeric CSV cells use the shortest decimal representation that round-trips
(Python's repr), so rerunning a config byte-identically reproduces every CSV
body. Timestamps live only in the manifest.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .proxy import ProxyStats, proxy_fidelity
from .trainer import ComparisonReport, StepRecord, detect_phase_transition

STEP_COLUMNS = [
    "step", "mean_reward", "lambda_used", "c_hat", "v2_hat", "c_exact",
    "v2_exact", "first_order", "second_order", "delta_mtp", "grad_norm_rl",
    "grad_norm_mtp", "forward_pass_count", "L_estimate",
]

_INT_COLUMNS = {"step", "forward_pass_count"}


@dataclass
class RunManifest:
    run_id: str
    config: dict
    artifact_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    seeds: list[int] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    status: str = "ok"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def fmt_cell(value) -> str:
    """Shortest round-trip decimal; blank for missing values."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return ""
    return repr(v)


def run_id_for(flat_config: dict) -> str:
    canon = json.dumps(flat_config, sort_keys=True)
    digest = hashlib.sha1(canon.encode()).hexdigest()[:8]
    task = flat_config.get("task.name", "task")
    regime = flat_config.get("regime.kind", "regime")
    seed = flat_config.get("train.seed", 0)
    return f"{task}-{regime}-seed{seed}-{digest}"


def write_csv(path: Path, columns: list[str], rows: list[list]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt_cell(v) if not isinstance(v, str) else v
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def record_row(rec: StepRecord) -> list:
    return [getattr(rec, col) for col in STEP_COLUMNS]


def write_steps_csv(path: Path, records: list[StepRecord]) -> None:
    write_csv(path, STEP_COLUMNS, [record_row(r) for r in records])


def read_steps_csv(path: Path) -> list[dict]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for key, cell in zip(header, cells):
            if cell == "":
                row[key] = None
            elif key in _INT_COLUMNS:
                row[key] = int(cell)
            else:
                row[key] = float(cell)
        rows.append(row)
    return rows


def write_events_jsonl(path: Path, events: list[dict]) -> None:
    path.write_text("".join(json.dumps(e) + "\n" for e in events))


def write_manifest(path: Path, manifest: RunManifest) -> None:
    payload = {
        "run_id": manifest.run_id,
        "artifact_version": manifest.artifact_version,
        "started_at": manifest.started_at,
        "finished_at": manifest.finished_at,
        "seeds": manifest.seeds,
        "outputs": manifest.outputs,
        "status": manifest.status,
        "config": manifest.config,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def read_manifest(path: Path) -> dict:
    return json.loads(path.read_text())


def save_run(out_dir: Path, run_id: str, flat_config: dict,
             records: list[StepRecord], events: list[dict],
             started_at: str, status: str = "ok") -> Path:
    run_dir = out_dir / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    write_steps_csv(run_dir / "steps.csv", records)
    write_events_jsonl(run_dir / "events.jsonl", events)
    manifest = RunManifest(
        run_id=run_id, config=flat_config, started_at=started_at,
        finished_at=utc_now(), seeds=[flat_config.get("train.seed", 0)],
        outputs=["steps.csv", "events.jsonl"], status=status)
    write_manifest(run_dir / "manifest.json", manifest)
    return run_dir


def step_events(records: list[StepRecord]) -> list[dict]:
    events = []
    for rec in records:
        events.append({"event": "step", "step": rec.step,
                       "mean_reward": rec.mean_reward,
                       "lambda_used": rec.lambda_used})
        if rec.lambda_cap_hits:
            events.append({"event": "lambda_capped", "step": rec.step,
                           "count": rec.lambda_cap_hits})
    return events


def write_comparison(out_dir: Path, report: ComparisonReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [[row.regime, row.seed, row.final_reward] for row in report.rows]
    write_csv(out_dir / "summary.csv", ["regime", "seed", "final_reward"], rows)
    agg = [[label, mean, stderr, n]
           for label, (mean, stderr, n) in report.summary.items()]
    write_csv(out_dir / "aggregate.csv", ["regime", "mean_final_reward", "stderr", "n_seeds"], agg)


class AnalysisError(ValueError):
    pass


def _require(rows: list[dict], columns: list[str], analysis: str) -> None:
    for col in columns:
        if any(row.get(col) is None for row in rows):
            raise AnalysisError(f"analysis {analysis!r} needs column {col!r}, "
                                "which is unpopulated (run with train.instrument_exact=true)")


def emit_decomposition(rows: list[dict], out: Path) -> None:
    _require(rows, ["first_order", "second_order", "delta_mtp"], "decomposition")
    body = [[r["step"], r["first_order"], r["second_order"], r["delta_mtp"]] for r in rows]
    write_csv(out, ["step", "first_order", "second_order", "delta_mtp"], body)


def emit_parabola(rows: list[dict], eta: float, out: Path) -> None:
    """Per-step coefficients of the gain parabola delta(lam) = b*lam - a*lam^2."""
    _require(rows, ["c_exact", "v2_exact", "L_estimate"], "parabola")
    body = []
    for r in rows:
        c, v2, L = r["c_exact"], r["v2_exact"], r["L_estimate"]
        b = eta * (1.0 - L * eta) * c
        a = L * eta * eta * v2 / 2.0
        if a > 0.0:
            lam_star = b / (2.0 * a)
            peak = b * b / (4.0 * a)
        else:
            lam_star = peak = None
        body.append([r["step"], a, b, lam_star, peak])
    write_csv(out, ["step", "a", "b", "lambda_star", "delta_at_optimum"], body)


def emit_fidelity(rows: list[dict], out: Path, out_summary: Path) -> None:
    _require(rows, ["c_hat", "v2_hat", "c_exact", "v2_exact"], "fidelity")
    body = [[r["step"], r["c_hat"], r["c_exact"], r["v2_hat"], r["v2_exact"]] for r in rows]
    write_csv(out, ["step", "c_hat", "c_exact", "v2_hat", "v2_exact"], body)
    history = [ProxyStats(c_hat=r["c_hat"], v2_hat=r["v2_hat"], lambda_t=0.0,
                          c_exact=r["c_exact"], v2_exact=r["v2_exact"]) for r in rows]
    try:
        r_c, r_v = proxy_fidelity(history)
    except ValueError as exc:
        raise AnalysisError(f"fidelity correlation undefined: {exc}") from exc
    write_csv(out_summary, ["pearson_c", "pearson_v2"], [[r_c, r_v]])


def emit_transition(rows: list[dict], eta: float, lambda_probe: float, out: Path) -> None:
    _require(rows, ["c_exact", "v2_exact", "L_estimate"], "transition")
    recs = [StepRecord(step=r["step"], mean_reward=0.0, lambda_used=0.0, c_hat=None,
                       v2_hat=None, c_exact=r["c_exact"], v2_exact=r["v2_exact"],
                       first_order=None, second_order=None, delta_mtp=None,
                       grad_norm_rl=0.0, grad_norm_mtp=0.0, forward_pass_count=0,
                       L_estimate=r["L_estimate"]) for r in rows]
    step = detect_phase_transition(recs, lambda_probe, eta)
    write_csv(out, ["lambda_probe", "transition_step"],
              [[lambda_probe, step if step is not None else None]])
