"""optexit-extract: dump hidden-state sidecars and logprob traces."""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .extract import ExtractorJob, dump_features
from .formats import ExtractorError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="optexit-extract",
                                     description=__doc__)
    parser.add_argument("--model", required=True, help="model id or local path")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--traces", help="trace JSONL to re-encode")
    group.add_argument("--prompts", help="prompts JSONL to generate from")
    parser.add_argument("--k", type=int, default=20)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--dtype", default="float32",
                        choices=("float32", "float64", "bfloat16"))
    parser.add_argument("--max-new-tokens", type=int, default=64)
    args = parser.parse_args(argv)

    job = ExtractorJob(model_id=args.model, out_dir=args.out,
                       traces_path=args.traces, prompts_path=args.prompts,
                       k=args.k, device=args.device, dtype=args.dtype,
                       max_new_tokens=args.max_new_tokens)
    try:
        report = dump_features(job)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    report_path = os.path.join(args.out, "report.csv")
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trace_id", "status", "detail"])
        for row in report.rows:
            writer.writerow([row["trace_id"], row["status"], row["detail"]])
    print(f"extracted {report.succeeded}/{len(report.rows)} traces "
          f"into {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
