"""Command-line entry point: validate, asm, run, cfg, corpus, sigdb."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus, cryptoid
from .cfg import recover_cfg, to_dot
from .isa import IsaError, assemble, load_image, serialize
from .machine import Machine, MachineError, StepBudgetExceeded
from .validator import AnalysisConfig, validate

EXIT_VALID = 0
EXIT_INVALID = 1
EXIT_ERROR = 2
EXIT_INCONCLUSIVE = 3

_OVERALL_EXIT = {"valid": EXIT_VALID, "invalid": EXIT_INVALID, "inconclusive": EXIT_INCONCLUSIVE}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bootkeeper",
        description="Validate measured-boot integrity properties on firmware images",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="run all property checks on images")
    p.add_argument("images", nargs="+", metavar="IMAGE")
    p.add_argument("--report", metavar="PATH", help="write the JSON report here "
                   "(single image) or one report per image into a directory")
    p.add_argument("--figures", metavar="DIR", help="render coverage and verdict "
                   "figures plus a CSV summary into DIR")
    p.add_argument("--timeout", type=float, default=600.0, metavar="SECONDS")
    p.add_argument("--max-steps", type=int, default=3_000_000)
    p.add_argument("--json", action="store_true", help="print reports as JSON")

    p = sub.add_parser("asm", help="assemble a .fasm source file")
    p.add_argument("source", metavar="SRC.fasm")
    p.add_argument("--out", "-o", required=True, metavar="OUT.fw")

    p = sub.add_parser("run", help="execute an image on the reference machine")
    p.add_argument("image", metavar="IMAGE")
    p.add_argument("--max-steps", type=int, default=3_000_000)
    p.add_argument("--tpm-log", action="store_true", help="print one line per TPM MMIO write")

    p = sub.add_parser("cfg", help="recover the control-flow graph")
    p.add_argument("image", metavar="IMAGE")
    p.add_argument("--dot", metavar="OUT.dot", help="write the graph in DOT form")
    p.add_argument("--timeout", type=float, default=600.0)

    p = sub.add_parser("corpus", help="generate the fixture corpus")
    p.add_argument("outdir", metavar="DIR")

    p = sub.add_parser("sigdb", help="reference signature database")
    p.add_argument("action", choices=["export"])
    p.add_argument("out", metavar="OUT.json")

    return parser


def _cmd_validate(args) -> int:
    config = AnalysisConfig(timeout_seconds=args.timeout, max_steps=args.max_steps)
    reports = []
    for name in args.images:
        try:
            blob = Path(name).read_bytes()
        except OSError as exc:
            print(f"bootkeeper: cannot read {name}: {exc}", file=sys.stderr)
            return EXIT_ERROR
        report = validate(blob, config)
        reports.append((name, report))
        if args.json:
            print(json.dumps(report.to_json(), sort_keys=True))
        else:
            statuses = " ".join(f"{v.short_id}={v.status}" for v in report.verdicts)
            print(f"{name}: {report.overall} ({statuses})")
            if args.verbose:
                for v in report.verdicts:
                    print(f"  {v.short_id} {v.status}: {v.message}")

    if args.report:
        target = Path(args.report)
        if len(reports) == 1 and not target.is_dir():
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(json.dumps(reports[0][1].to_json(), sort_keys=True, indent=2) + "\n")
        else:
            target.mkdir(parents=True, exist_ok=True)
            for name, report in reports:
                out = target / (Path(name).stem + ".report.json")
                out.write_text(json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n")
    if args.figures:
        from . import report as report_mod

        report_mod.render_all(reports, args.figures)

    worst = EXIT_VALID
    for _, report in reports:
        code = _OVERALL_EXIT[report.overall]
        if code == EXIT_INVALID:
            worst = EXIT_INVALID
        elif code == EXIT_INCONCLUSIVE and worst == EXIT_VALID:
            worst = EXIT_INCONCLUSIVE
    return worst


def _cmd_asm(args) -> int:
    try:
        source = Path(args.source).read_text()
        image = assemble(source)
    except (OSError, IsaError) as exc:
        print(f"bootkeeper: {exc}", file=sys.stderr)
        return EXIT_ERROR
    Path(args.out).write_bytes(serialize(image))
    print(f"{args.out}: entry=0x{image.entry:08x} code={len(image.code)} data={len(image.data)}")
    return EXIT_VALID


def _cmd_run(args) -> int:
    try:
        image = load_image(Path(args.image).read_bytes())
    except (OSError, IsaError) as exc:
        print(f"bootkeeper: {exc}", file=sys.stderr)
        return EXIT_ERROR
    machine = Machine(image)
    try:
        machine.run(args.max_steps)
    except StepBudgetExceeded as exc:
        print(f"bootkeeper: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except MachineError as exc:
        print(f"bootkeeper: runtime fault: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.tpm_log:
        for step, addr, value in machine.tpm.access_log:
            print(f"step={step} addr=0x{addr:08x} value=0x{value:08x}")
    print(f"PCR0={machine.tpm.pcr0_hex}")
    return EXIT_VALID


def _cmd_cfg(args) -> int:
    try:
        image = load_image(Path(args.image).read_bytes())
    except (OSError, IsaError) as exc:
        print(f"bootkeeper: {exc}", file=sys.stderr)
        return EXIT_ERROR
    config = AnalysisConfig(timeout_seconds=args.timeout)
    graph = recover_cfg(image, config.explore_config(args.timeout))
    dot = to_dot(graph)
    if args.dot:
        Path(args.dot).write_text(dot + "\n")
        print(f"{args.dot}: {len(graph.nodes)} blocks, {len(graph.edges)} edges, "
              f"{len(graph.unresolved)} unresolved")
    else:
        print(dot)
    return EXIT_VALID


def _cmd_corpus(args) -> int:
    specs = corpus.build_corpus(args.outdir)
    print(f"{args.outdir}: {len(specs)} fixtures written")
    return EXIT_VALID


def _cmd_sigdb(args) -> int:
    db = cryptoid.make_reference_signatures()
    cryptoid.export_db(db, args.out)
    print(f"{args.out}: {len(db.signatures)} signatures")
    return EXIT_VALID


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "validate": _cmd_validate,
        "asm": _cmd_asm,
        "run": _cmd_run,
        "cfg": _cmd_cfg,
        "corpus": _cmd_corpus,
        "sigdb": _cmd_sigdb,
    }
    try:
        return handlers[args.command](args)
    except OSError as exc:
        print(f"bootkeeper: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
