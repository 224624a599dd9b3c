"""Command-line entry point.

Subcommands: ``search`` (evolutionary run), ``eval`` (downstream tables),
``data gen``/``data inspect`` (feature containers), ``serve`` (one protocol
worker), ``monitor`` (standalone pool supervision), ``report`` (curve data
from a history CSV).  Exit codes: 0 success, 1 runtime failure, 2 usage
error; failures print one ``error: ...`` line to stderr.

Artifacts are written with stable formatting (sorted JSON keys, repr floats)
so a rerun with the same seed and a scripted gateway is byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from . import seeds
from .adaptation import hyper_grid
from .downstream import (
    AlgorithmPair,
    HpoSpace,
    domain_generalization_eval,
    evaluate_downstream,
)
from .errors import GatewayError, InfrastructureError, NoViableCandidates, StoreError
from .evolution import SearchConfig, SearchResult, StageHistory, run_search
from .fabric import ExecutionFabric, FabricConfig, TaskRef
from .gateway import EndpointConfig, HttpGateway, ScriptedGateway
from .store import SynthSpec, load_dataset, synth_dataset, write_dataset

HISTORY_HEADER = "iteration,min_fitness,mean_fitness,errors,tokens_in,tokens_out"


@dataclass
class DataConfig:
    holdout: list[str] = field(default_factory=list)
    downstream: list[str] = field(default_factory=list)
    shots: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    search: SearchConfig
    fabric: FabricConfig
    data: DataConfig
    llm: EndpointConfig | None
    eval_trials: int | None = None


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    search = SearchConfig(**raw.get("search", {}))
    search.validate()
    fabric = FabricConfig(**raw.get("fabric", {}))
    data = DataConfig(**raw.get("data", {}))
    llm = EndpointConfig(**raw["llm"]) if "llm" in raw else None
    for path_str in data.holdout + data.downstream:
        if not Path(path_str).exists():
            raise FileNotFoundError(f"configured dataset does not exist: {path_str}")
    eval_raw = raw.get("eval", {})
    return RunConfig(search=search, fabric=fabric, data=data, llm=llm,
                     eval_trials=eval_raw.get("trials"))


def make_gateway(config: RunConfig, mock_script: str | None):
    if mock_script:
        with open(mock_script, encoding="utf-8") as f:
            script = json.load(f)
        if isinstance(script, dict):
            script = script["responses"]
        return ScriptedGateway(script)
    if config.llm is None:
        raise GatewayError("no [llm] section in config and no --mock-llm script")
    return HttpGateway(config.llm)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_history_csv(history: StageHistory, path: Path) -> None:
    lines = [HISTORY_HEADER]
    for it in history.iterations:
        lines.append(
            f"{it.iteration},{_fmt(it.min_fitness)},{_fmt(it.mean_fitness)},"
            f"{it.errors},{it.tokens_in},{it.tokens_out}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_archive_json(result: SearchResult, path: Path) -> None:
    payload = {
        "best": {
            "fs": result.fs.ident if result.fs else None,
            "fs_code": result.fs.code if result.fs else None,
            "lg": result.lg.ident,
            "lg_code": result.lg.code,
        },
        "stages": [
            {
                "stage": h.stage,
                "round": h.round,
                "error_rate": h.error_rate(),
                "tokens_in": h.tokens()[0],
                "tokens_out": h.tokens()[1],
                "min_curve": h.min_curve(),
            }
            for h in result.histories
        ],
        "individuals": result.archive_records(),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_search(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.search.seed = args.seed
    if not config.data.holdout:
        raise ValueError("search needs data.holdout paths in the config")
    gateway = make_gateway(config, args.mock_llm)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ExecutionFabric(config.fabric) as fabric:
        fabric.start_monitor()
        refs = []
        d = None
        for path in config.data.holdout:
            dsid = fabric.register_dataset(path)
            ds_d = fabric.task(TaskRef(dsid, 1, config.search.seed)).d
            d = ds_d if d is None else d
            refs.extend(TaskRef(dsid, k, config.search.seed)
                        for k in config.data.shots)
        evaluate = fabric.make_evaluator(refs, hyper_grid(d))
        started = time.monotonic()
        result = run_search(config.search, evaluate, gateway)
        elapsed = time.monotonic() - started

    artifacts = []
    for idx, history in enumerate(result.histories):
        path = out_dir / f"history_{idx}_{history.stage}.csv"
        write_history_csv(history, path)
        artifacts.append(path)
    archive_path = out_dir / "individuals.json"
    write_archive_json(result, archive_path)
    artifacts.append(archive_path)

    calls, tokens_in, tokens_out = gateway.usage.snapshot()
    for path in artifacts:
        print(path)
    print(f"best fitness: {result.lg.fitness!r}")
    print(f"gateway calls: {calls}, tokens in/out: {tokens_in}/{tokens_out}, "
          f"wall: {elapsed:.1f}s")
    return 0


def _pair_from_args(args) -> AlgorithmPair:
    if args.archive:
        payload = json.loads(Path(args.archive).read_text(encoding="utf-8"))
        best = payload["best"]
        return AlgorithmPair(lg_code=best["lg_code"], fs_code=best.get("fs_code"),
                             label="searched")
    name = args.baseline or "gda"
    if name == "ape":
        return AlgorithmPair(lg_code=seeds.APE_LOGITS_CODE,
                             fs_code=seeds.APE_FS_CODE, label="ape")
    if name == "tip_adapter":
        return AlgorithmPair(lg_code=seeds.TIP_LOGITS_CODE, label="tip_adapter")
    if name == "gda":
        return AlgorithmPair(lg_code=seeds.GDA_LOGITS_CODE, label="gda")
    raise ValueError(f"unknown baseline {name!r}")


def cmd_eval(args) -> int:
    config = load_config(args.config)
    if not config.data.downstream:
        raise ValueError("eval needs data.downstream paths in the config")
    pair = _pair_from_args(args)
    trials = config.eval_trials
    if trials is None:
        trials = 100 if "gda" in pair.label else 500
    space = HpoSpace(trials=trials, include_topk=pair.fs_code is not None)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ExecutionFabric(config.fabric) as fabric:
        ids = [fabric.register_dataset(p) for p in config.data.downstream]
        report = evaluate_downstream(fabric, pair, ids, config.data.shots,
                                     config.data.seeds, space)
        accs = None
        if args.domain_generalization and len(config.data.downstream) > 1:
            source = load_dataset(config.data.downstream[0])
            targets = {Path(p).stem: load_dataset(p)
                       for p in config.data.downstream[1:]}
            accs = domain_generalization_eval(fabric, pair, source, targets, space,
                                              seed=config.data.seeds[0])
    csv_path = out_dir / "accuracy.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    summary = report.to_json_summary()
    if accs is not None:
        summary["domain_generalization"] = accs
    json_path = out_dir / "accuracy.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    print(csv_path)
    print(json_path)
    return 0


def cmd_data(args) -> int:
    if args.data_cmd == "gen":
        spec = SynthSpec(
            d=args.d, num_classes=args.classes, train_per_class=args.train_per_class,
            val_per_class=args.val_per_class, test_per_class=args.test_per_class,
            sigma=args.sigma, tau=args.tau, name=args.name,
        )
        ds = synth_dataset(spec, args.seed)
        write_dataset(ds, args.out)
        print(args.out)
        return 0
    ds = load_dataset(args.path)
    info = {
        "name": ds.name, "d": ds.d, "classes": ds.num_classes,
        "n_train": len(ds.train_labels), "n_val": len(ds.val_labels),
        "n_test": len(ds.test_labels),
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .service import serve
    print(f"serving on 127.0.0.1:{args.port}", flush=True)
    serve(args.port, args.data_root, args.max_seconds)
    return 0


def cmd_monitor(args) -> int:
    config = load_config(args.config)
    if config.fabric.backend != "sandbox":
        raise ValueError("monitor requires fabric.backend = 'sandbox'")
    with ExecutionFabric(config.fabric) as fabric:
        for path in config.data.holdout + config.data.downstream:
            fabric.register_dataset(path)
        cycles = 0
        while args.cycles == 0 or cycles < args.cycles:
            time.sleep(config.fabric.probe_interval_s)
            report = fabric.probe_and_heal()
            print(json.dumps({"cycle": cycles, "healed": report,
                              "workers": fabric.live_worker_count()}), flush=True)
            cycles += 1
    return 0


def cmd_report(args) -> int:
    lines = Path(args.history).read_text(encoding="utf-8").strip().splitlines()
    if lines[0] != HISTORY_HEADER:
        raise ValueError(f"not a history CSV: {args.history}")
    iterations, minima = [], []
    for line in lines[1:]:
        parts = line.split(",")
        iterations.append(int(parts[0]))
        minima.append(float(parts[1]))
    curve = {
        "iteration": iterations,
        "min_fitness": minima,
        "final": minima[-1] if minima else None,
    }
    out = Path(args.out or (str(args.history) + ".curve.json"))
    out.write_text(json.dumps(curve, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evoadapt",
        description="search and evaluate training-free adaptation algorithms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run an evolutionary search")
    p.add_argument("--config", required=True)
    p.add_argument("--mock-llm", default=None,
                   help="JSON file with scripted gateway responses")
    p.add_argument("--seed", type=int, default=None,
                   help="override the [search] seed from the config")
    p.add_argument("--out", default="evoadapt_out")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("eval", help="evaluate an algorithm pair downstream")
    p.add_argument("--config", required=True)
    p.add_argument("--archive", default=None, help="individuals.json from a search")
    p.add_argument("--baseline", default=None,
                   choices=["tip_adapter", "ape", "gda"])
    p.add_argument("--domain-generalization", action="store_true")
    p.add_argument("--out", default="evoadapt_eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("data", help="generate or inspect feature containers")
    data_sub = p.add_subparsers(dest="data_cmd", required=True)
    g = data_sub.add_parser("gen")
    g.add_argument("--out", required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--train-per-class", type=int, required=True)
    g.add_argument("--val-per-class", type=int, default=16)
    g.add_argument("--test-per-class", type=int, default=32)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--tau", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="synth")
    g.set_defaults(fn=cmd_data)
    i = data_sub.add_parser("inspect")
    i.add_argument("path")
    i.set_defaults(fn=cmd_data)

    p = sub.add_parser("serve", help="host one wire-protocol worker (native backend)")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--max-seconds", type=float, default=60.0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("monitor", help="supervise a worker pool standalone")
    p.add_argument("--config", required=True)
    p.add_argument("--cycles", type=int, default=0, help="0 = run forever")
    p.set_defaults(fn=cmd_monitor)

    p = sub.add_parser("report", help="extract curve data from a history CSV")
    p.add_argument("history")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, StoreError, GatewayError,
            InfrastructureError, NoViableCandidates) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
