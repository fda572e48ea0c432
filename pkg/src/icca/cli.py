"""Command-line interface: run, score, report, repeat-test, import, validate.

Options come from built-in defaults, then a TOML config file (one table per
command), then command-line flags, then ``--set key=value`` overrides. The
resolved options are written as JSON next to every command's outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .agents import AgentError, AgentRegistry, CapabilityError, Decode
from .core import Interaction
from .corpus import CorpusError, Profile, import_external, load_corpus, synthetic_corpus
from .engine import ConfigError, RunConfig, load_transcript, run_batch, write_run_manifest
from .metrics import (
    Metric,
    MetricError,
    MetricSeries,
    load_stoplist,
    load_vectors,
    per_repetition,
    read_metrics_csv,
    write_metrics_csv,
)
from .promptkit import TemplateError, Templates, VARIANTS
from .stats import BootstrapSpec, repeat_preference_experiment

log = logging.getLogger("icca")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(text: Any) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(value: Any) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


@dataclass(frozen=True)
class Opt:
    kind: Callable[[Any], Any]
    default: Any
    help: str


SCHEMAS: dict[str, dict[str, Opt]] = {
    "run": {
        "variant": Opt(_str_list, ["L3"], "variant names, comma separated"),
        "listener": Opt(str, "scripted:perfect", "listener agent spec"),
        "speaker": Opt(str, "replay", "speaker agent spec"),
        "corpus": Opt(str, None, "corpus manifest JSON"),
        "synthetic": Opt(str, None, "synthetic profile instead of a corpus: converging, repeating, random"),
        "synthetic_count": Opt(int, 54, "number of synthetic interactions"),
        "synthetic_seed": Opt(int, 0, "seed of the first synthetic interaction"),
        "seed": Opt(int, 0, "master seed for label shuffles and manipulations"),
        "out": Opt(str, "runs", "output directory"),
        "jobs": Opt(int, 1, "interactions run in parallel"),
        "grid": Opt(_bool, False, "merge the 4 images into one 2x2 grid image"),
        "adapters": Opt(str, None, "directory of adapter JSON files"),
        "templates": Opt(str, None, "directory overriding prompt templates"),
        "temperature": Opt(float, 0.0, "sampling temperature"),
        "max_tokens": Opt(int, None, "reply token cap"),
    },
    "score": {
        "transcripts": Opt(str, None, "directory of transcript JSONL files"),
        "corpus": Opt(str, None, "score a corpus manifest directly"),
        "variant": Opt(_str_list, None, "only score transcripts of these variants"),
        "vectors": Opt(str, None, "GloVe-format word vectors for SIMILARITY"),
        "tokenizer": Opt(str, "whitespace", "length tokenizer: whitespace, filtered, hf:NAME"),
        "stoplist": Opt(str, None, "function-word list replacing the shipped one"),
        "resamples": Opt(int, 10000, "bootstrap resamples"),
        "confidence": Opt(float, 0.95, "bootstrap confidence level"),
        "seed": Opt(int, 0, "bootstrap seed"),
        "out": Opt(str, "scores", "output directory"),
    },
    "report": {
        "metrics": Opt(_str_list, None, "metrics CSV files, comma separated"),
        "labels": Opt(_str_list, None, "series labels, one per CSV"),
        "out": Opt(str, "report", "output directory"),
    },
    "repeat-test": {
        "corpus": Opt(str, None, "corpus manifest JSON"),
        "synthetic": Opt(str, None, "synthetic profile instead of a corpus"),
        "synthetic_count": Opt(int, 54, "number of synthetic interactions"),
        "synthetic_seed": Opt(int, 0, "seed of the first synthetic interaction"),
        "scorer": Opt(str, "scripted:scorer", "scoring agent spec"),
        "adapters": Opt(str, None, "directory of adapter JSON files"),
        "images": Opt(_bool, True, "include images in the scored prompts"),
        "out": Opt(str, "repeat_test", "output directory"),
    },
    "import": {
        "raw": Opt(str, None, "directory of raw external data"),
        "mapping": Opt(str, None, "mapping config JSON"),
        "out": Opt(str, "corpus", "output corpus directory"),
    },
    "validate": {
        "corpus": Opt(str, None, "corpus manifest JSON"),
        "images": Opt(_bool, True, "check that image files decode"),
    },
}


def _coerce(command: str, key: str, value: Any) -> Any:
    schema = SCHEMAS[command]
    if key not in schema:
        raise UsageError(f"unknown option {key!r} for {command} (known: {', '.join(sorted(schema))})")
    if value is None:
        return None
    try:
        return schema[key].kind(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def resolve_options(command: str, config_path: str | None, flags: dict[str, Any],
                    overrides: Sequence[str]) -> dict[str, Any]:
    opts = {k: o.default for k, o in SCHEMAS[command].items()}
    if config_path:
        try:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        unknown_tables = set(data) - set(SCHEMAS)
        if unknown_tables:
            raise UsageError(f"unknown config tables: {', '.join(sorted(unknown_tables))}")
        section = data.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config entry {command!r} must be a table")
        for key, value in section.items():
            opts[key.replace("-", "_")] = _coerce(command, key.replace("-", "_"), value)
    for key, value in flags.items():
        if value is not None:
            opts[key] = _coerce(command, key, value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key = key.strip().replace("-", "_")
        opts[key] = _coerce(command, key, value.strip())
    return opts


def _write_snapshot(out: Path, command: str, opts: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.json").write_text(
        json.dumps({"command": command, "options": opts}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _interactions(opts: dict[str, Any]) -> list[Interaction]:
    if bool(opts.get("corpus")) == bool(opts.get("synthetic")):
        raise UsageError("give exactly one of corpus or synthetic")
    if opts.get("corpus"):
        return load_corpus(opts["corpus"])
    try:
        profile = Profile(opts["synthetic"])
    except ValueError:
        raise UsageError(f"unknown synthetic profile {opts['synthetic']!r}") from None
    return synthetic_corpus(opts["synthetic_seed"], profile, opts["synthetic_count"])


# -- commands ------------------------------------------------------------------------------

def cmd_run(opts: dict[str, Any]) -> int:
    for name in opts["variant"]:
        if name not in VARIANTS:
            raise UsageError(f"unknown variant {name!r} (known: {', '.join(VARIANTS)})")
    if opts["jobs"] < 1:
        raise UsageError("jobs must be at least 1")
    inters = _interactions(opts)
    out = Path(opts["out"])
    templates = Templates.load(opts["templates"])
    registry = AgentRegistry(opts["adapters"])
    decode = Decode(temperature=opts["temperature"], max_tokens=opts["max_tokens"])
    configs = [
        RunConfig(variant=name, interaction=inter, listener=opts["listener"], speaker=opts["speaker"],
                  master_seed=opts["seed"], grid=opts["grid"], decode=decode,
                  output=out / "transcripts" / f"{name}__{inter.id}__seed{opts['seed']}.jsonl")
        for name in opts["variant"] for inter in inters
    ]
    _write_snapshot(out, "run", opts)
    result = run_batch(configs, opts["jobs"], registry, templates)
    write_run_manifest(out / "run_manifest.json", result, {"options": opts, "templates": templates.digest()})
    summary = result.summary()
    print(f"{summary['complete']} complete, {summary['partial']} partial")
    for err in summary["errors"]:
        print(f"  {err['run_id']} trial {err['trial']}: {err['error']}", file=sys.stderr)
    return EXIT_PARTIAL if summary["partial"] else EXIT_OK


def _empty_series(metric: Metric) -> MetricSeries:
    reps = tuple(range(2, 7))
    none = (None,) * len(reps)
    return MetricSeries(metric, reps, none, none, none, (0,) * len(reps), (0,) * len(reps))


def cmd_score(opts: dict[str, Any]) -> int:
    if bool(opts["transcripts"]) == bool(opts["corpus"]):
        raise UsageError("give exactly one of transcripts or corpus")
    skipped = 0
    if opts["transcripts"]:
        files = sorted(Path(opts["transcripts"]).rglob("*.jsonl"))
        items = [load_transcript(p) for p in files]
        if opts["variant"]:
            wanted = {v.upper() for v in opts["variant"]}
            items = [t for t in items if t.run_id.split("__")[0] in wanted]
        complete = [t for t in items if t.complete]
        skipped = len(items) - len(complete)
        for t in items:
            if not t.complete:
                log.warning("skipping incomplete transcript %s", t.run_id)
    else:
        complete = load_corpus(opts["corpus"], rejected=[], check_images=False)
    if not complete:
        raise UsageError("no complete transcripts to score")
    spec = BootstrapSpec(opts["resamples"], opts["confidence"], opts["seed"])
    stoplist = load_stoplist(opts["stoplist"]) if opts["stoplist"] else None
    series = [per_repetition(m, complete, opts["tokenizer"], stoplist=stoplist, bootstrap=spec)
              for m in (Metric.LENGTH, Metric.ACCURACY, Metric.WNR, Metric.WND)]
    if opts["vectors"]:
        vectors = load_vectors(opts["vectors"])
        series.append(per_repetition(Metric.SIMILARITY, complete, stoplist=stoplist, vectors=vectors,
                                     bootstrap=spec))
    else:
        log.warning("no vectors given; SIMILARITY rows left empty")
        series.append(_empty_series(Metric.SIMILARITY))
    out = Path(opts["out"])
    _write_snapshot(out, "score", opts)
    write_metrics_csv(series, out / "metrics.csv")
    stats = {
        "interactions": len(complete),
        "skipped_incomplete": skipped,
        "bootstrap": {"resamples": spec.resamples, "confidence": spec.confidence, "seed": spec.seed},
        "series": {s.metric.value: s.rows() for s in series},
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"scored {len(complete)} interactions -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_report(opts: dict[str, Any]) -> int:
    from .report import render_report

    paths = opts["metrics"]
    if not paths:
        raise UsageError("report needs at least one metrics CSV")
    labels = opts["labels"] or [Path(p).parent.name or Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise UsageError(f"{len(paths)} metrics files but {len(labels)} labels")
    tables = {label: read_metrics_csv(p) for label, p in zip(labels, paths)}
    out = Path(opts["out"])
    _write_snapshot(out, "report", opts)
    written = render_report(tables, out)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_repeat_test(opts: dict[str, Any]) -> int:
    inters = _interactions(opts)
    agent = AgentRegistry(opts["adapters"]).get(opts["scorer"])
    result = repeat_preference_experiment(agent, inters, with_images=opts["images"])
    out = Path(opts["out"])
    _write_snapshot(out, "repeat-test", opts)
    report = result.to_json()
    (out / "repeat_test.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    lp = result.logprob
    print(f"logprob: {lp.n_positive} positive, {lp.n_negative} negative, {lp.n_ties} ties, p={lp.p_value}")
    return EXIT_OK


def cmd_import(opts: dict[str, Any]) -> int:
    if not opts["raw"] or not opts["mapping"]:
        raise UsageError("import needs raw and mapping")
    manifest = import_external(opts["raw"], opts["mapping"], opts["out"])
    print(f"imported {manifest.count} interactions into {opts['out']}")
    return EXIT_OK


def cmd_validate(opts: dict[str, Any]) -> int:
    if not opts["corpus"]:
        raise UsageError("validate needs corpus")
    rejected: list = []
    inters = load_corpus(opts["corpus"], rejected=rejected, check_images=opts["images"])
    for iid, problems in rejected:
        for p in problems:
            print(f"{iid}: {p}")
    print(f"{len(inters)} valid, {len(rejected)} invalid")
    return EXIT_PARTIAL if rejected else EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "score": cmd_score,
    "report": cmd_report,
    "repeat-test": cmd_repeat_test,
    "import": cmd_import,
    "validate": cmd_validate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icca", description="Repeated reference game harness.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        for key, opt in schema.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=opt.help)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: getattr(args, k) for k in SCHEMAS[args.command]}
    try:
        opts = resolve_options(args.command, args.config, flags, args.set)
        return COMMANDS[args.command](opts)
    except (UsageError, ConfigError, CapabilityError, CorpusError, MetricError, TemplateError,
            AgentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
