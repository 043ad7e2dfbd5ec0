"""Command-line client: submit/status/metrics against a broker, offline experiments and replay.

Exit codes: 0 success, 1 remote or runtime error, 2 input validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import urllib.error
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any
from urllib.parse import quote

import numpy as np

from .core import AppManifest, ExecutionContext, SchemaError
from .events import LogError, read_log, write_log
from .replay import replay
from .simulator import ScenarioConfig, run_scenario

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2

RQ_METRICS = {
    "1": ("ood_to_hardware", "in_distribution_to_hardware"),
    "2": ("hybrid_mae", "software_only_mae", "improvement"),
    "3": ("first_quarter", "final_quarter"),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class CliConfig:
    broker_url: str = "http://127.0.0.1:8080"
    token: str = ""
    output_mode: str = "table"

    @classmethod
    def load(cls, args: argparse.Namespace) -> "CliConfig":
        cfg = cls()
        path = args.config or os.environ.get("EMAAS_CONFIG")
        if path:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, ValueError) as exc:
                raise CliError(EXIT_INPUT, f"cannot read config {path}: {exc}") from None
            cfg = replace(cfg, **{k: v for k, v in doc.items() if k in ("broker_url", "token")})
        cfg.broker_url = args.broker_url or os.environ.get("EMAAS_BROKER_URL") or cfg.broker_url
        cfg.token = os.environ.get("EMAAS_TOKEN", cfg.token)
        cfg.output_mode = "json" if args.json else "table"
        return cfg


def _emit(doc: Any, cfg: CliConfig, table: str) -> None:
    if cfg.output_mode == "json":
        print(json.dumps(doc, sort_keys=True))
    else:
        print(table)


def _request(cfg: CliConfig, method: str, path: str, body: Any = None) -> dict:
    if not cfg.broker_url.startswith(("http://", "https://")):
        raise CliError(EXIT_INPUT, f"malformed broker url {cfg.broker_url!r}")
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(cfg.broker_url.rstrip("/") + path, data=data, method=method)
    req.add_header("Content-Type", "application/json")
    if cfg.token:
        req.add_header("Authorization", f"Bearer {cfg.token}")
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        try:
            doc = json.loads(exc.read())
        except ValueError:
            doc = {"message": str(exc)}
        if exc.code == 400:
            raise CliError(EXIT_INPUT, f"{doc.get('path', '$')}: {doc.get('message')}") from None
        raise CliError(EXIT_RUNTIME, f"broker returned {exc.code}: {doc.get('message')}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise CliError(EXIT_RUNTIME, f"cannot reach broker: {exc}") from None


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"{path}: no such file") from None
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def cmd_submit(args: argparse.Namespace, cfg: CliConfig) -> int:
    doc = _read_json(args.manifest)
    try:
        AppManifest.from_dict(doc)
    except SchemaError as exc:
        raise CliError(EXIT_INPUT, f"{exc.path}: {exc.message}") from None
    try:
        context = ExecutionContext.from_dict({"device_model": args.device, "os_version": args.os_version,
                                              "api_level": args.api_level, "framework": args.framework})
    except SchemaError as exc:
        raise CliError(EXIT_INPUT, f"context.{exc.path}: {exc.message}") from None
    body = {"manifest": doc, "context": context.to_dict()}
    if args.request_token:
        body["request_token"] = args.request_token
    resp = _request(cfg, "POST", "/jobs", body)
    _emit({"job_id": resp["job_id"]}, cfg, resp["job_id"])
    return EXIT_OK


def cmd_status(args: argparse.Namespace, cfg: CliConfig) -> int:
    resp = _request(cfg, "GET", f"/jobs/{quote(args.job_id, safe='')}")
    lines = [f"job       {resp['job_id']}", f"device    {resp['device_model']}",
             f"state     {resp['state']}"]
    if "queue_position" in resp:
        lines.append(f"queue     {resp['queue_position']}")
    if "record" in resp:
        rec = resp["record"]
        lines.append(f"source    {rec['source']}")
        lines.append(f"energy_j  {rec['energy_j']:.4f}")
        lines.append(f"delta_t   {rec['delta_t']:.3f}")
        if "epsilon" in rec:
            lines.append(f"epsilon   {rec['epsilon']:.4f}")
    if "reason" in resp:
        lines.append(f"reason    {resp['reason']}")
    for key in ("resubmission_of", "resubmitted_as"):
        if key in resp:
            lines.append(f"{key.replace('_', ' ')}  {resp[key]}")
    for d in resp["decision_trace"]:
        pred = d["predicted_abs_error"]
        lines.append(f"  decision seq={d['seq']} {d['action']} peer={d['peer_id']} "
                     f"predicted={'-' if pred is None else f'{pred:.4f}'} reliable={d['reliable']} "
                     f"n_r={d['n_r']} theta={d['theta']}"
                     + (f" reason={d['reason']}" if d["reason"] else ""))
    _emit(resp, cfg, "\n".join(lines))
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace, cfg: CliConfig) -> int:
    resp = _request(cfg, "GET", "/metrics")
    lines = [f"hardware completed  {resp['hardware_completed']}",
             f"model completed     {resp['model_completed']}",
             f"hardware fraction   {resp['hardware_fraction']}",
             f"events              {resp['events']}"]
    for state, count in resp["jobs"].items():
        lines.append(f"jobs {state:<15} {count}")
    for device, depth in resp["queue_depths"].items():
        lines.append(f"queue {device:<14} {depth}")
    for device, m in resp["models"].items():
        lines.append(f"model {device:<14} n={m['n']} n_r={m['n_r']} theta={m['theta']} "
                     f"|w|={m['weight_norm']:.6f}")
    _emit(resp, cfg, "\n".join(lines))
    return EXIT_OK


def _run_seed(cfg: ScenarioConfig, out_dir: str) -> dict:
    report = run_scenario(cfg)
    seed_dir = Path(out_dir) / f"seed-{cfg.seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    write_log(report.events, seed_dir / "events.jsonl")
    return report.to_dict()


def _aggregate(reports: list[dict], rqs: list[str]) -> dict:
    summary: dict[str, Any] = {"seeds": [r["config"]["seed"] for r in reports]}
    for rq in rqs:
        block: dict[str, Any] = {}
        for metric in RQ_METRICS[rq]:
            values = [r[f"rq{rq}"][metric] for r in reports]
            present = [v for v in values if v is not None]
            block[metric] = {
                "per_seed": values,
                "mean": float(np.mean(present)) if present else None,
                "min": min(present) if present else None,
                "max": max(present) if present else None,
            }
        if rq == "3":
            series = [r["rq3"]["hardware_fraction"] for r in reports]
            block["hardware_fraction_mean"] = [
                float(np.mean(col)) if (col := [s[i] for s in series if s[i] is not None]) else None
                for i in range(len(series[0]))
            ]
        summary[f"rq{rq}"] = block
    return summary


def _fmt(v: Any) -> str:
    return "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))


def cmd_experiment(args: argparse.Namespace, cfg: CliConfig) -> int:
    doc = _read_json(args.scenario)
    try:
        base = ScenarioConfig.from_dict(doc)
    except SchemaError as exc:
        raise CliError(EXIT_INPUT, f"{exc.path}: {exc.message}") from None
    if args.seeds < 1:
        raise CliError(EXIT_INPUT, "--seeds must be at least 1")
    rqs = ["1", "2", "3"] if args.rq == "all" else [args.rq]
    configs = [replace(base, seed=base.seed + i) for i in range(args.seeds)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            reports = list(pool.map(_run_seed, configs, [str(out)] * len(configs)))
    else:
        reports = [_run_seed(c, str(out)) for c in configs]
    summary = _aggregate(reports, rqs)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")

    lines = [f"{'metric':<32}{'mean':>10}{'min':>10}{'max':>10}"]
    for rq in rqs:
        for metric in RQ_METRICS[rq]:
            s = summary[f"rq{rq}"][metric]
            lines.append(f"rq{rq}.{metric:<28}{_fmt(s['mean']):>10}{_fmt(s['min']):>10}{_fmt(s['max']):>10}")
    if "2" in rqs:
        lines.append("")
        lines.append(f"{'seed':<8}{'hybrid_mae':>12}{'software_only_mae':>20}")
        for seed, h, sw in zip(summary["seeds"], summary["rq2"]["hybrid_mae"]["per_seed"],
                               summary["rq2"]["software_only_mae"]["per_seed"]):
            lines.append(f"{seed:<8}{_fmt(h):>12}{_fmt(sw):>20}")
    if "3" in rqs:
        series = summary["rq3"]["hardware_fraction_mean"]
        lines.append("")
        lines.append("hardware fraction per window: " + " ".join(_fmt(v) for v in series))
    _emit(summary, cfg, "\n".join(lines))
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, cfg: CliConfig) -> int:
    path = Path(args.log)
    if not path.exists():
        raise CliError(EXIT_INPUT, f"{path}: no such file")
    try:
        events, partial = read_log(path)
    except LogError as exc:
        raise CliError(EXIT_INPUT, f"corrupt log at seq {exc.seq}: {exc}") from None
    if not events:
        _emit({"verdict": "empty log", "events": 0, "partial": partial, "models": {}}, cfg, "empty log")
        return EXIT_OK
    try:
        result = replay(events)
    except LogError as exc:
        raise CliError(EXIT_INPUT, f"corrupt log at seq {exc.seq}: {exc}") from None
    reg = result.scheduler.registry
    models = {
        d: {"n": em.n, "n_r": reg.reliability_models[d].n, "weight_norm": float(np.linalg.norm(em.w))}
        for d, em in sorted(reg.energy_models.items())
    }
    verified = result.verified
    verdict = "no snapshot" if verified is None else ("match" if verified else "mismatch")
    doc = {
        "verdict": verdict,
        "partial": partial,
        "events": len(events),
        "snapshots_checked": len(result.checks),
        "divergent_seqs": result.divergences[:20],
        "models": models,
    }
    lines = [f"events    {len(events)}{' (partial: log is truncated)' if partial else ''}"]
    for d, m in models.items():
        lines.append(f"{d:<16} n={m['n']} n_r={m['n_r']} |w|={m['weight_norm']:.6f}")
    lines.append(f"snapshots {len(result.checks)} checked")
    if result.divergences:
        lines.append("divergent " + " ".join(map(str, doc["divergent_seqs"])))
    lines.append(f"verdict   {verdict}")
    _emit(doc, cfg, "\n".join(lines))
    return EXIT_RUNTIME if verdict == "mismatch" else EXIT_OK


def cmd_serve(args: argparse.Namespace, cfg: CliConfig) -> int:
    from .service import ServiceConfig, serve

    doc = _read_json(args.service_config)
    try:
        service_cfg = ServiceConfig.from_dict(doc)
    except SchemaError as exc:
        raise CliError(EXIT_INPUT, f"{exc.path}: {exc.message}") from None
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    serve(service_cfg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emaas", description=__doc__.splitlines()[0])
    parser.add_argument("--broker-url", help="broker base URL (or EMAAS_BROKER_URL)")
    parser.add_argument("--config", help="CLI config file with broker_url and token")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="submit an app manifest for measurement")
    p.add_argument("manifest")
    p.add_argument("--device", required=True)
    p.add_argument("--os-version", default="")
    p.add_argument("--api-level", type=int, default=0)
    p.add_argument("--framework", default="")
    p.add_argument("--request-token")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", help="show a job's state and decision trace")
    p.add_argument("job_id")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("metrics", help="show broker metrics")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("experiment", help="run simulation experiments offline")
    p.add_argument("scenario")
    p.add_argument("--rq", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", default="experiment-out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("replay", help="replay an event log and verify model snapshots")
    p.add_argument("log")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="run the broker service")
    p.add_argument("service_config")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = CliConfig.load(args)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
