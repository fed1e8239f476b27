"""``quine-harness {fractal|streaming|pipelines}``.

Writes ``report.json`` (and figures with ``--figures``) into ``--out`` and a
tab-separated summary to stdout.  Exit status 0 iff every check passed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import run_fractal_experiment, run_pipelines_experiment, run_streaming_experiment
from .library import LibrarySpec, StreamSpec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quine-harness", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="experiment", required=True)

    def common(sp):
        sp.add_argument("--out", metavar="DIR", help="report directory (default: ./harness-<experiment>)")
        sp.add_argument("--figures", action="store_true", help="also render PNG figures into --out")

    f = sub.add_parser("fractal", help="recursive delegation over a synthetic library")
    f.add_argument("--hexes", type=int, default=10)
    f.add_argument("--shelves", type=int, default=5)
    f.add_argument("--volumes", type=int, default=4)
    f.add_argument("--seed", type=int, default=7)
    f.add_argument("--fanout", type=int, default=10)
    f.add_argument("--recurse", type=int, default=2, help="how many depth-1 children fork again")
    common(f)

    s = sub.add_parser("streaming", help="exec renewal over a segmented stdin stream")
    s.add_argument("--segments", type=int, default=9)
    s.add_argument("--needle", type=int, default=None, metavar="K",
                   help="1-based position of the needle segment (default: last)")
    s.add_argument("--renewal-every", type=int, default=1)
    s.add_argument("--tokens", type=int, default=16, help="words per segment")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--material", choices=("pipe", "file"), default="pipe")
    common(s)

    pl = sub.add_parser("pipelines", help="filter, chain and && compositions")
    pl.add_argument("--lines", type=int, default=1000)
    common(pl)
    return p


def summary_lines(report) -> list[str]:
    rows = [("experiment", report.experiment), ("ok", report.ok),
            ("root_exit_status", report.root_exit_status), ("runtime_s", report.runtime_s)]
    for k, v in report.metrics.items():
        if not isinstance(v, (dict, list)):
            rows.append((k, v))
    rows += [(f"check:{k}", "PASS" if v else "FAIL") for k, v in report.checks.items()]
    return [f"{k}\t{v}" for k, v in rows]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out or f"harness-{args.experiment}").resolve()
    out.mkdir(parents=True, exist_ok=True)
    work = out / "work"
    if args.experiment == "fractal":
        spec = LibrarySpec(args.hexes, args.shelves, args.volumes, args.seed)
        report = run_fractal_experiment(spec, args.fanout, recurse=args.recurse, workdir=work)
    elif args.experiment == "streaming":
        pos = args.needle if args.needle is not None else args.segments
        spec = StreamSpec(args.segments, pos - 1, args.tokens, args.seed)
        report = run_streaming_experiment(spec, args.renewal_every, workdir=work,
                                          material=args.material)
    else:
        report = run_pipelines_experiment(workdir=work, lines=args.lines)

    figures = []
    if args.figures:
        from . import plots
        from ..trace import iter_sessions

        if report.tree:
            figures.append(plots.plot_tree(report.tree, out / "tree.png"))
        if args.experiment == "streaming":
            events = [e for s in iter_sessions(report.trace_dir) for e in s.events]
            figures.append(plots.plot_generations(events, out / "generations.png"))
    data = report.to_dict()
    data["figures"] = figures
    (out / "report.json").write_text(json.dumps(data, indent=1), encoding="utf-8")

    for line in summary_lines(report):
        print(line)
    print(f"report\t{out / 'report.json'}")
    for fig in figures:
        print(f"figure\t{fig}")
    return 0 if report.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
