"""Command-line front end: pack samples, run the unpacker, compare traces."""
from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .dbi import EngineConfig, EngineStats, SelfModMethod, UnpackReport, resume_native, run_unpack
from .image import MalformedImage, PackedImage, load, read_image, write_image
from .machine import MASK32, StopReason, TraceEntry, run_reference
from .oep import Strategy
from .packers import PACKER_IDS, PackError, corpus, make_payload, pack, parse_sidecar, sidecar_path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERDICT = 2
EXIT_IO = 3

DEFAULT_FUEL = 10_000_000
TRACE_LINE = re.compile(r"PC=([0-9A-F]{8}) OP=(\S+)")


class UsageError(Exception):
    pass


class FormatError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for verdict failures here
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- traces and stats ----------------------------------------------------

def format_trace(trace: list[TraceEntry]) -> str:
    return "".join(f"PC={pc:08X} OP={op}\n" for pc, op in trace)


def write_trace(trace: list[TraceEntry], path: str | Path) -> None:
    Path(path).write_text(format_trace(trace), encoding="ascii")


def read_trace(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    for n, line in enumerate(lines, 1):
        if not TRACE_LINE.fullmatch(line):
            raise FormatError(f"{path}:{n}: not a trace line: {line!r}")
    return lines


def first_divergence(a: list[str], b: list[str]) -> int | None:
    """Index of the first differing line, or None when identical."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


@dataclass
class StatsReport:
    """EngineStats flattened together with the run's identity and outcome."""

    method: str
    strategy: str
    image: str
    verdict: str
    oep: int | None
    stats: EngineStats

    def to_dict(self) -> dict:
        out = self.stats.to_dict()
        out.update(method=self.method, strategy=self.strategy, image=self.image,
                   verdict=self.verdict, oep=None if self.oep is None else f"0x{self.oep:08X}")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> StatsReport:
        names = {f.name for f in fields(EngineStats)}
        oep = data.get("oep")
        return cls(data["method"], data["strategy"], data["image"], data["verdict"],
                   None if oep is None else int(oep, 16),
                   EngineStats(**{k: v for k, v in data.items() if k in names}))

    @classmethod
    def from_json(cls, text: str) -> StatsReport:
        return cls.from_dict(json.loads(text))


def parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(part, 0) & MASK32 for part in text.split(":"))
    except ValueError:
        raise UsageError(f"bad range {text!r}; expected LO:HI") from None
    if lo >= hi:
        raise UsageError(f"empty range {text!r}")
    return lo, hi


def _load_sidecar(image_path: str | Path) -> dict | None:
    path = sidecar_path(image_path)
    if not path.exists():
        return None
    return parse_sidecar(path.read_text(encoding="ascii"))


# --- subcommands ---------------------------------------------------------

def cmd_payload(args) -> int:
    write_image(make_payload(), args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _write_sample(sample, out: Path) -> None:
    write_image(sample.image, out)
    sidecar_path(out).write_text(sample.sidecar(), encoding="ascii")


def cmd_pack(args) -> int:
    sample = pack(read_image(args.payload), args.packer)
    _write_sample(sample, Path(args.output))
    print(f"wrote {args.output} (true_oep=0x{sample.true_oep:08X})")
    return EXIT_OK


def cmd_corpus(args) -> int:
    out = Path(args.directory)
    out.mkdir(parents=True, exist_ok=True)
    payload = read_image(args.payload) if args.payload else make_payload()
    for pid, sample in corpus(payload).items():
        _write_sample(sample, out / f"{pid.lower()}.bopx")
        print(f"wrote {out / (pid.lower() + '.bopx')}")
    return EXIT_OK


def cmd_run(args) -> int:
    image = read_image(args.image)
    report = run_reference(load(image), args.fuel)
    if args.trace:
        write_trace(report.trace, args.trace)
    print(f"stop={report.reason.value} R0={report.r0} steps={len(report.trace)}")
    return EXIT_OK if report.reason is StopReason.HALTED else EXIT_VERDICT


def _config(args) -> EngineConfig:
    return EngineConfig(
        selfmod_method=SelfModMethod(args.method),
        oep_strategy=Strategy(args.oep),
        oep_range=parse_range(args.range) if args.range else None,
        fuel=args.fuel,
        fixups_enabled=not args.no_fixups,
    )


@dataclass
class UnpackOutcome:
    """What one unpack session produced, in a picklable shape."""

    image: str
    code: int
    lines: list[str]
    stats: dict


def unpack_one(path: str, config: EngineConfig, resume: bool,
               trace_path: str | None = None, stats_path: str | None = None) -> UnpackOutcome:
    image: PackedImage = read_image(path)
    sidecar = _load_sidecar(path)
    report: UnpackReport = run_unpack(image, config)
    lines = []
    code = EXIT_OK
    if report.success:
        suffix = " (candidate)" if report.candidate else ""
        lines.append(f"OEP=0x{report.oep:08X}{suffix}")
        if sidecar and not report.candidate and report.oep != sidecar.get("true_oep"):
            lines.append(f"warning: sidecar true_oep is 0x{sidecar['true_oep']:08X}")
    else:
        lines.append(f"verdict={report.verdict.value}")
        code = EXIT_VERDICT
    if resume and report.success:
        final = resume_native(report, config.fuel)
        lines.append(f"stop={final.reason.value} R0={final.r0}")
        expected = sidecar.get("expected_r0") if sidecar else None
        if final.reason is not StopReason.HALTED:
            code = EXIT_VERDICT
        elif expected is not None and final.r0 != expected:
            lines.append(f"R0 mismatch: sidecar expects {expected}")
            code = EXIT_VERDICT
    if trace_path:
        write_trace(report.trace, trace_path)
    stats = StatsReport(config.selfmod_method.value, config.oep_strategy.value, Path(path).stem,
                        report.verdict.value, report.oep, report.stats)
    if stats_path:
        Path(stats_path).write_text(stats.to_json(), encoding="ascii")
    return UnpackOutcome(str(path), code, lines, stats.to_dict())


def cmd_unpack(args) -> int:
    outcome = unpack_one(args.image, _config(args), args.resume, args.trace, args.stats)
    for line in outcome.lines:
        print(line)
    return outcome.code


def _batch_job(job: tuple[str, dict, bool]) -> UnpackOutcome:
    path, config, resume = job
    try:
        return unpack_one(path, EngineConfig(**config), resume)
    except (OSError, MalformedImage) as exc:
        return UnpackOutcome(path, EXIT_IO, [f"error: {exc}"], {})


def cmd_batch(args) -> int:
    config = asdict(_config(args))
    jobs = [(path, config, args.resume) for path in args.images]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_batch_job, jobs))
    else:
        outcomes = [_batch_job(job) for job in jobs]
    for out in outcomes:
        print(f"{out.image}: {' | '.join(out.lines)}")
    if args.stats:
        Path(args.stats).write_text(json.dumps([o.stats for o in outcomes], indent=2) + "\n")
    return max((o.code for o in outcomes), default=EXIT_OK)


def cmd_diff_trace(args) -> int:
    a, b = read_trace(args.a), read_trace(args.b)
    if args.prefix:
        b = b[:len(a)]
    i = first_divergence(a, b)
    if i is None:
        return EXIT_OK
    left = a[i] if i < len(a) else "<end of trace>"
    right = b[i] if i < len(b) else "<end of trace>"
    print(f"traces diverge at line {i + 1}:\n  {args.a}: {left}\n  {args.b}: {right}")
    return EXIT_VERDICT


# --- parser --------------------------------------------------------------

def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=[m.value for m in SelfModMethod],
                   default=SelfModMethod.ADLER32.value, help="self-modification check")
    p.add_argument("--oep", choices=[s.value for s in Strategy],
                   default=Strategy.SECTION_RANGE.value, help="OEP detection strategy")
    p.add_argument("--range", metavar="LO:HI", help="OEP address range override")
    p.add_argument("--no-fixups", action="store_true",
                   help="deliver raw cache addresses in exception records")
    p.add_argument("--resume", action="store_true",
                   help="after the OEP, keep running natively until HALT")
    p.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    p.add_argument("--stats", metavar="FILE", help="write engine statistics as JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bopunpack", description="Generic DBI unpacker for BOP-32 images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("payload", help="write the canonical payload image")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_payload)

    p = sub.add_parser("pack", help="pack a payload with one corpus packer")
    p.add_argument("payload")
    p.add_argument("--packer", required=True, type=str.upper, choices=PACKER_IDS)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("corpus", help="write all corpus samples into a directory")
    p.add_argument("directory")
    p.add_argument("--payload", help="payload image (default: canonical payload)")
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("run", help="run an image on the reference interpreter")
    p.add_argument("image")
    p.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    p.add_argument("--trace", metavar="FILE")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("unpack", help="run the loader stub under instrumentation")
    p.add_argument("image")
    _add_engine_flags(p)
    p.add_argument("--trace", metavar="FILE")
    p.set_defaults(func=cmd_unpack)

    p = sub.add_parser("batch", help="unpack several images, optionally in parallel")
    p.add_argument("images", nargs="+")
    _add_engine_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("diff-trace", help="compare two trace files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--prefix", action="store_true", help="accept A being a prefix of B")
    p.set_defaults(func=cmd_diff_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "fuel", 1) <= 0:
            raise UsageError("--fuel must be positive")
        if getattr(args, "jobs", 1) <= 0:
            raise UsageError("--jobs must be positive")
        return args.func(args)
    except UsageError as exc:
        print(f"bopunpack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MalformedImage, FormatError, PackError, UnicodeDecodeError) as exc:
        print(f"bopunpack: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
