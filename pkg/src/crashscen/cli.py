"""Command-line entry point: ``crashscen <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import retrieval, roadnet, scenario_io, trajectory
from .token_model import BigramModel, LogitServer, RemoteBackend, TableModel, load_model


def open_backend(spec: str):
    kind, sep, target = spec.partition(":")
    if not sep:
        raise SystemExit(f"backend must look like table:FILE, bigram:FILE or remote:HOST:PORT, got {spec!r}")
    if kind == "remote":
        return RemoteBackend(target)
    if kind not in ("table", "bigram"):
        raise SystemExit(f"unknown backend kind {kind!r}")
    model = load_model(target)
    expected = TableModel if kind == "table" else BigramModel
    if not isinstance(model, expected):
        raise SystemExit(f"{target} is not a {kind} model fixture")
    return model


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def cmd_retrieve(args) -> int:
    store = retrieval.load_store(args.store)
    for rank, hit in enumerate(store.retrieve_top_k(args.query, args.k), 1):
        print(f"{rank}\t{hit.entry.id}\t{hit.score:.6f}")
    return 0


def cmd_build_store(args) -> int:
    docs = [json.loads(line) for line in Path(args.docs).read_text(encoding="utf-8").splitlines() if line.strip()]
    store = retrieval.build_store(docs, retrieval.EmbedderSpec(dimension=args.dimension))
    retrieval.save_store(store, args.out)
    print(f"wrote {len(store)} entries to {args.out}")
    return 0


def cmd_evaluate_net(args) -> int:
    gt = roadnet.parse_sumo_net(Path(args.gt).read_bytes())
    cand = roadnet.parse_sumo_net(Path(args.candidate).read_bytes())
    cmp = roadnet.compare_networks(gt, cand)
    if args.json:
        print(json.dumps(cmp.to_dict(), indent=2))
    else:
        for key, value in cmp.to_dict().items():
            if key != "per_segment_lane_diffs":
                print(f"{key}\t{_fmt(value)}")
        for seg in cmp.per_segment_lane_diffs or ():
            print(f"segment\t{seg['gt_edge']}\t{seg['candidate_edge']}\t{seg['gt_lanes']}\t{seg['candidate_lanes']}\t{seg['diff']}")
    if args.figures:
        from .figures import plot_networks

        plot_networks(gt, cand, args.figures)
    return 0


def cmd_evaluate_traj(args) -> int:
    cfg = trajectory.CriticalityConfig.from_json(args.config) if args.config else trajectory.CriticalityConfig()
    ts = trajectory.read_trajectories(args.input)
    ref = trajectory.read_trajectories(args.reference) if args.reference else None
    report = trajectory.evaluate(ts, cfg, ref)
    text = json.dumps(report.to_dict(include_series=args.series), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.figures:
        from .figures import plot_trajectories

        plot_trajectories(ts, report, args.figures)
    return 0


def cmd_score(args) -> int:
    cfg = trajectory.CriticalityConfig.from_json(args.config) if args.config else trajectory.CriticalityConfig()
    report = trajectory.CriticalityReport.from_dict(json.loads(Path(args.report).read_text()))
    score, level = trajectory.emergency_score(report.p_collision, report.min_ttc, report.min_pet, report.min_distance, cfg)
    print(f"score\t{score}\nlevel\t{level}")
    return 0


def cmd_validate(args) -> int:
    status = scenario_io.validate_bundle(scenario_io.load_bundle(args.bundle))
    if args.json:
        print(json.dumps(status.to_dict(), indent=2))
    else:
        print("valid" if status.valid else "invalid")
        for r in status.reasons:
            print(f"{r.code}\t{r.file or ''}\t{r.detail}")
    return 0 if status.valid else 1


def cmd_corpus_stats(args) -> int:
    stats = scenario_io.corpus_stats(scenario_io.load_corpus(args.root))
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2))
    else:
        for k, v in stats.to_dict().items():
            print(f"{k}\t{_fmt(v)}")
    return 0


def cmd_generate(args) -> int:
    from .pipeline import CrashCase, PipelineConfig, generate_scenario, write_result

    case = CrashCase.from_json(args.case)
    store = retrieval.load_store(args.store) if args.store else None
    source = open_backend(args.backend)
    config = PipelineConfig(
        alpha=args.alpha,
        k=args.k,
        max_tokens=args.max_tokens,
        seed=args.seed,
        temperature=args.temperature,
        backend_name=args.backend,
    )
    result = generate_scenario(case, source, store, config)
    write_result(result, args.out)
    print("valid" if result.status.valid else "invalid")
    for r in result.status.reasons:
        print(f"{r.code}\t{r.file or ''}\t{r.detail}")
    return 0 if result.status.valid else 1


def cmd_serve(args) -> int:
    source = open_backend(args.backend)
    embed_spec = retrieval.EmbedderSpec(dimension=args.dimension)
    server = LogitServer(source, (args.host, args.port), embedder=lambda text: retrieval.embed(text, embed_spec))
    print(f"serving on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crashscen", description="Crash-report scenario generation and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("retrieve", help="rank store entries against a query")
    s.add_argument("--store", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("-k", type=int, default=3)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("build-store", help="embed a JSONL file of {id,text,tags} into a store file")
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dimension", type=int, default=retrieval.DEFAULT_DIMENSION)
    s.set_defaults(func=cmd_build_store)

    s = sub.add_parser("evaluate-net", help="ICE/LCE/CE between two SUMO networks")
    s.add_argument("--gt", required=True)
    s.add_argument("--candidate", required=True)
    s.add_argument("--json", action="store_true")
    s.add_argument("--figures", help="directory for network plots")
    s.set_defaults(func=cmd_evaluate_net)

    s = sub.add_parser("evaluate-traj", help="criticality report for a trajectory file")
    s.add_argument("--input", required=True)
    s.add_argument("--reference")
    s.add_argument("--config")
    s.add_argument("--out", help="also write the report JSON here")
    s.add_argument("--series", action="store_true", help="include per-step series in the JSON")
    s.add_argument("--figures", help="directory for trajectory and time-series plots")
    s.set_defaults(func=cmd_evaluate_traj)

    s = sub.add_parser("score", help="recompute S_e and level from a report JSON")
    s.add_argument("--report", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("validate", help="validate a net/xodr/xosc bundle directory")
    s.add_argument("--bundle", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("corpus-stats", help="GSR and AER over bundle subdirectories")
    s.add_argument("--root", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_corpus_stats)

    s = sub.add_parser("generate", help="generate a scenario bundle from a crash case")
    s.add_argument("--case", required=True)
    s.add_argument("--store")
    s.add_argument("--backend", required=True, help="table:FILE | bigram:FILE | remote:HOST:PORT")
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.7)
    s.add_argument("--seed", type=int)
    s.add_argument("--temperature", type=float, help="sample at this temperature instead of greedy decoding")
    s.add_argument("-k", type=int, default=3)
    s.add_argument("--max-tokens", type=int, default=4096)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("serve", help="expose a local model over the remote logit protocol")
    s.add_argument("--backend", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7070)
    s.add_argument("--dimension", type=int, default=retrieval.DEFAULT_DIMENSION)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
