"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 usage, 2 data error, 3 transport.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import analysis, baselines, controller, curation, probe, reporting
from .errors import DataError, OptExitError, TransportError, UsageError
from .features import make_provider
from .gateway import LlmClient
from .mockserver import load_script, mock_serve
from .traces import load_labeled, load_traces, save_labeled


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_GLOBAL_DEFAULTS = {"endpoint": None, "pipeline_endpoint": None, "seed": 7,
                    "max_inflight": 8, "out": None}


def _global_flags() -> _Parser:
    # accepted both before and after the subcommand; SUPPRESS keeps the
    # subcommand parse from clobbering a value given at the top level
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--endpoint", help="completion endpoint base URL")
    common.add_argument("--pipeline-endpoint",
                        help="endpoint for the extract/identify/verify model")
    common.add_argument("--seed", type=int)
    common.add_argument("--max-inflight", type=int)
    common.add_argument("--out", help="primary output path")
    return common


def _build_parser() -> _Parser:
    common = _global_flags()
    parser = _Parser(prog="optexit", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add(name: str, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add("curate", help="label traces with answer positions")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--max-retries", type=int, default=4)
    p.add_argument("--min-fuzzy", type=float, default=0.9)
    p.add_argument("--report", dest="report_path")

    p = add("train-probe", help="train the exit probe")
    p.add_argument("--data", required=True, help="labeled JSONL file")
    p.add_argument("--features", choices=("logprob", "sidecar"), default="logprob")
    p.add_argument("--sidecar-dir")
    p.add_argument("--arch", choices=("linear", "mlp"), default="linear")
    p.add_argument("--hidden", type=int, nargs="*", default=[])
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--tau", type=float, default=0.7)

    p = add("run", help="early-exit live runs over a trace corpus")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--features", choices=("logprob", "sidecar"), default="logprob")
    p.add_argument("--sidecar-dir")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--majority", type=int, default=6)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--temperature", type=float, default=0.7,
                   help="sampling temperature for live generation")
    p.add_argument("--answers", help="ground-truth answers JSONL")

    p = add("evaluate", help="run an exit policy over a dataset")
    p.add_argument("--policy", required=True,
                   choices=("vanilla", "nothinking", "deer", "dynasor", "optexit"))
    p.add_argument("--dataset", required=True, help="labeled JSONL file")
    p.add_argument("--answers", help="ground-truth answers JSONL")
    p.add_argument("--probe")
    p.add_argument("--features", choices=("logprob", "sidecar"), default="logprob")
    p.add_argument("--sidecar-dir")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--majority", type=int, default=6)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--deer-chunk", type=int, default=64)
    p.add_argument("--deer-threshold", type=float, default=0.95)
    p.add_argument("--dynasor-interval", type=int, default=64)
    p.add_argument("--dynasor-w", type=int, default=8)

    p = add("horl", help="hindsight-optimal truncation indices")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--strategy", choices=("exact", "grid"), default="exact")
    p.add_argument("--grid-points", type=int, default=21)

    p = add("sweep", help="truncation sweep over fractions")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--fractions", default="0.05:1.0:0.05",
                   help="start:stop:step or comma list")
    p.add_argument("--answers", help="ground-truth answers JSONL")

    p = add("analyze", help="signal analyses over labeled traces")
    p.add_argument("kind", choices=("event-lock", "token-shift", "rate-length"))
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--signal", choices=("confidence", "logprob"),
                   default="confidence")
    p.add_argument("--pre", type=int, default=100)
    p.add_argument("--post", type=int, default=100)
    p.add_argument("--smooth", type=int, default=1,
                   help="centered moving-average width for event-lock means")
    p.add_argument("--needle", default="hmm")
    p.add_argument("--bins", type=int, default=10)

    p = add("report", help="benchmark table from results CSVs")
    p.add_argument("--results", required=True, nargs="+")
    p.add_argument("--traces", help="labeled JSONL for dataset names")
    p.add_argument("--svg")

    p = add("pareto", help="non-dominated rows of a benchmark table")
    p.add_argument("--rows", required=True)
    p.add_argument("--svg")

    p = add("mock-serve", help="serve a deterministic script")
    p.add_argument("--script", required=True)
    p.add_argument("--port", type=int, default=8900)
    return parser


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required for this command")
    return value


def _client(args, pipeline: bool = False) -> LlmClient:
    url = args.pipeline_endpoint if pipeline else args.endpoint
    if pipeline and not url:
        url = args.endpoint
    _require(url, "--pipeline-endpoint" if pipeline else "--endpoint")
    return LlmClient(url, max_inflight=args.max_inflight)


def _load_answers(path: str | None) -> dict[str, str]:
    import json
    answers: dict[str, str] = {}
    if not path:
        return answers
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                answers[obj["trace_id"]] = obj["answer"]
    return answers


def _parse_fractions(spec: str) -> list[float]:
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError("fraction range must be start:stop:step")
        start, stop, step = (float(x) for x in parts)
        out = []
        f = start
        while f <= stop + 1e-9:
            out.append(round(f, 10))
            f += step
        return out
    return [float(x) for x in spec.split(",") if x]


def _truth_for(labeled, answers: dict[str, str]) -> dict[str, str]:
    """Ground truth map; the full-run answer stands in when none is given."""
    truth = {}
    for lt in labeled:
        tid = lt.trace.trace_id
        truth[tid] = answers.get(tid, lt.trace.final_answer or "")
    return truth


def _cmd_curate(args) -> int:
    llm = _client(args, pipeline=True)
    traces = load_traces(args.infile)
    config = curation.CurationConfig(max_retries=args.max_retries,
                                     min_fuzzy_score=args.min_fuzzy)
    labeled, rep = curation.assemble_dataset(traces, config, llm)
    save_labeled(labeled, _require(args.out, "--out"))
    if args.report_path:
        import csv
        with open(args.report_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trace_id", "status", "retries_used", "token_index"])
            for row in rep.rows:
                w.writerow([row["trace_id"], row["status"],
                            row["retries_used"], row["token_index"]])
    print(f"curated {rep.succeeded}/{rep.total} traces "
          f"({100.0 * rep.success_rate:.1f}%)")
    return 0


def _cmd_train_probe(args) -> int:
    labeled = load_labeled(args.data)
    provider = make_provider(args.features, args.sidecar_dir)
    labeled.sort(key=lambda lt: lt.trace.trace_id)
    dataset = [(provider.for_trace(lt.trace), lt.labels, lt.loss_mask)
               for lt in labeled]
    config = probe.TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size,
        max_epochs=args.epochs, early_stop_patience=args.patience,
        validation_fraction=args.val_frac, seed=args.seed)
    model, rep = probe.train(dataset, config, arch=args.arch,
                             hidden=tuple(args.hidden), tau=args.tau)
    probe.save_model(model, _require(args.out, "--out"))
    print(f"best epoch {rep.best_epoch}: validation macro-F1 {rep.best_val_f1:.4f} "
          f"({rep.n_train_tokens} train / {rep.n_val_tokens} val tokens)")
    return 0


def _exit_config(args) -> controller.ExitConfig:
    return controller.ExitConfig(window=args.window, majority_min=args.majority,
                                 prob_threshold=args.tau)


def _cmd_run(args) -> int:
    llm = _client(args)
    model = probe.load_model(args.probe)
    provider = make_provider(args.features, args.sidecar_dir)
    config = _exit_config(args)
    traces = load_traces(args.infile)
    answers = _load_answers(args.answers)
    outcomes, correct = [], []
    for trace in sorted(traces, key=lambda t: t.trace_id):
        outcome = controller.run_session(trace.prompt, model, provider, config,
                                         llm, reference=trace,
                                         temperature=args.temperature)
        truth = answers.get(trace.trace_id, trace.final_answer or "")
        outcomes.append(outcome)
        correct.append(outcome.answer == curation.normalize_answer(truth))
    reporting.write_results_csv(outcomes, correct, _require(args.out, "--out"))
    matched = sum(1 for o in outcomes if o.matched_full_run_answer)
    crs = [o.compression_rate for o in outcomes if o.compression_rate is not None]
    mean_cr = sum(crs) / len(crs) if crs else 1.0
    print(f"ran {len(outcomes)} sessions: mean CR {mean_cr:.3f}, "
          f"{matched}/{len(outcomes)} matched the full-run answer")
    return 0


def _cmd_evaluate(args) -> int:
    labeled = load_labeled(args.dataset)
    labeled.sort(key=lambda lt: lt.trace.trace_id)
    answers = _load_answers(args.answers)
    truth = _truth_for(labeled, answers)
    outcomes = []
    if args.policy == "vanilla":
        outcomes = [baselines.vanilla_outcome(lt.trace) for lt in labeled]
    elif args.policy == "nothinking":
        llm = _client(args)
        outcomes = [baselines.nothinking(lt.trace.prompt, llm,
                                         reference=lt.trace) for lt in labeled]
    elif args.policy == "deer":
        llm = _client(args)
        config = baselines.DeerConfig(chunk_tokens=args.deer_chunk,
                                      prob_threshold=args.deer_threshold)
        outcomes = [baselines.deer_outcome(lt.trace, llm, config)
                    for lt in labeled]
    elif args.policy == "dynasor":
        llm = _client(args)
        config = baselines.DynasorConfig(interval_tokens=args.dynasor_interval,
                                         consistency_w=args.dynasor_w)
        outcomes = [baselines.dynasor_exit(lt.trace.prompt, llm, config,
                                           reference=lt.trace) for lt in labeled]
    else:  # optexit
        llm = _client(args)
        model = probe.load_model(_require(args.probe, "--probe"))
        provider = make_provider(args.features, args.sidecar_dir)
        config = _exit_config(args)
        outcomes = [controller.run_session(lt.trace.prompt, model, provider,
                                           config, llm, reference=lt.trace)
                    for lt in labeled]
    correct = [o.answer == curation.normalize_answer(truth[o.trace_id])
               for o in outcomes]
    reporting.write_results_csv(outcomes, correct, _require(args.out, "--out"))
    print(f"{args.policy}: {sum(correct)}/{len(correct)} correct")
    return 0


def _cmd_horl(args) -> int:
    import csv
    llm = _client(args)
    traces = load_traces(args.infile)
    strategy = "exact_scan" if args.strategy == "exact" else "grid"
    with open(_require(args.out, "--out"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trace_id", "horl", "m"])
        for trace in sorted(traces, key=lambda t: t.trace_id):
            idx = controller.horl(trace, llm, strategy=strategy,
                                  grid_points=args.grid_points)
            w.writerow([trace.trace_id, idx, trace.m])
    return 0


def _cmd_sweep(args) -> int:
    llm = _client(args)
    labeled = load_labeled(args.infile)
    truth = _truth_for(labeled, _load_answers(args.answers))
    positions = {lt.trace.trace_id: lt.answer.token_index for lt in labeled}
    result = controller.truncation_sweep(
        [lt.trace for lt in labeled], _parse_fractions(args.fractions), llm,
        truth, answer_positions=positions)
    reporting.write_sweep_csv(result.rows, _require(args.out, "--out"))
    if result.horl_marker is not None:
        print(f"mean first-arrival fraction: {result.horl_marker:.3f}")
    return 0


def _cmd_analyze(args) -> int:
    labeled = load_labeled(args.infile)
    labeled.sort(key=lambda lt: lt.trace.trace_id)
    out = _require(args.out, "--out")
    if args.kind == "event-lock":
        make = (analysis.confidence_series if args.signal == "confidence"
                else analysis.logprob_series)
        series = [make(lt.trace) for lt in labeled]
        positions = [lt.answer.token_index for lt in labeled]
        avg = analysis.event_locked_average(series, positions,
                                            (args.pre, args.post))
        if args.smooth > 1:  # presentation smoothing only
            avg.means = analysis.moving_average(avg.means, args.smooth)
        analysis.write_event_lock_csv(avg, out)
    else:
        points = [analysis.token_shift_rates(lt.trace, lt.answer.token_index,
                                             args.needle) for lt in labeled]
        if args.kind == "token-shift":
            analysis.write_shift_csv(points, out)
            summary = analysis.shift_summary(points)
            print(f"above diagonal: {summary['above_diagonal_pct']:.1f}%  "
                  f"at origin: {summary['at_origin_pct']:.1f}%  n={summary['n']}")
        else:
            rows = analysis.rate_vs_length(points, bins=args.bins)
            analysis.write_rate_length_csv(rows, out)
    return 0


def _cmd_report(args) -> int:
    dataset_of = {}
    if args.traces:
        for lt in load_labeled(args.traces):
            dataset_of[lt.trace.trace_id] = lt.trace.source
    outcomes, correct = [], []
    for path in args.results:
        o, c = reporting.read_results_csv(path)
        outcomes.extend(o)
        correct.extend(c)
    rows = reporting.report(outcomes, correct, dataset_of=dataset_of)
    reporting.write_table_csv(rows, _require(args.out, "--out"))
    if args.svg:
        series = [(r.policy, [(r.mean_cr_pct, r.accuracy_pct)]) for r in rows]
        reporting.write_svg(reporting.svg_scatter(
            series, "Accuracy vs compression", "mean CR (%)", "accuracy (%)"),
            args.svg)
    return 0


def _cmd_pareto(args) -> int:
    rows = reporting.read_table_csv(args.rows)
    frontier = reporting.pareto(rows)
    reporting.write_table_csv(frontier, _require(args.out, "--out"))
    if args.svg:
        series = [("frontier", [(r.mean_cr_pct, r.accuracy_pct)
                                for r in frontier]),
                  ("all", [(r.mean_cr_pct, r.accuracy_pct) for r in rows])]
        reporting.write_svg(reporting.svg_scatter(
            series, "Pareto frontier", "mean CR (%)", "accuracy (%)",
            connect=True), args.svg)
    return 0


def _cmd_mock_serve(args) -> int:
    script = load_script(args.script)
    handle = mock_serve(script, port=args.port)
    print(f"serving {len(script.entries)} script entries on {handle.url}")
    try:
        import time
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        handle.stop()
    return 0


_COMMANDS = {
    "curate": _cmd_curate,
    "train-probe": _cmd_train_probe,
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "horl": _cmd_horl,
    "sweep": _cmd_sweep,
    "analyze": _cmd_analyze,
    "report": _cmd_report,
    "pareto": _cmd_pareto,
    "mock-serve": _cmd_mock_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in _GLOBAL_DEFAULTS.items():
            if not hasattr(args, name):
                setattr(args, name, default)
        np.random.seed(args.seed)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OptExitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
