"""Command-line surface: mine, ft, check, justify, gen, compare.

Exit status: 0 success or consistent verdict, 1 inconsistent verdict,
2 usage error, 3 data or validation error.
"""
import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from consistency_ft import __version__
from consistency_ft.consistency_engine import (ProxyPair, SegmentEvaluation, SegmentGrounder, check_segment,
                                               check_segment_no_aux, justify, load_frames, save_frames)
from consistency_ft.errors import ConfigurationError, ConsistencyError
from consistency_ft.ft_orchestrator import FtConfig, FtMode, fixture_hash, run_ft_loop, run_sweep
from consistency_ft.logging_setup import setup_logging
from consistency_ft.logic import TaskKind
from consistency_ft.proxy_miner import (ManifestEntry, ProxyMap, as_fraction, load_labeled_records, mine_proxies,
                                        proxy_map_from_rules, write_manifest)
from consistency_ft.recognizer_sim import generate_dataset, make_stream, synthesize_frames
from consistency_ft.rules_dsl import load_groundings, load_rules, print_groundings
from consistency_ft.run_ledger import RunLedger
from consistency_ft.scenario import build_scenario, scenario_rules
from consistency_ft.settings import Settings, load_config, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INCONSISTENT = 1
EXIT_USAGE = 2
EXIT_DATA = 3


def _threshold(value: str) -> Fraction:
    try:
        threshold = as_fraction(value)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))
    if not 0 < threshold <= 1:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1], got {value}")
    return threshold


def _noise(value: str) -> float:
    try:
        noise = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value}")
    if not 0.0 <= noise < 1.0:
        raise argparse.ArgumentTypeError(f"noise must lie in [0, 1), got {value}")
    return noise


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return n


def _counts(value: str):
    """'20' (every class) or '1=10,2=12'."""
    value = value.strip()
    try:
        if "=" not in value:
            return int(value)
        counts = {}
        for item in value.split(","):
            key, _, n = item.partition("=")
            counts[int(key)] = int(n)
        return counts
    except ValueError:
        raise argparse.ArgumentTypeError(f"counts must be N or CLASS=N,...; got {value!r}")


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "json"), default="text", help="output format on stdout")
    common.add_argument("--log-file", default=None, help="also log to this file (rotated weekly)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="consistency-ft",
                                     description="Consistency-driven fine-tuning toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("mine", parents=[common], help="mine per-class proxy assertion sets from a labeled dataset")
    p.add_argument("--manifest", required=True, help="dataset manifest (JSON) listing groundings files")
    p.add_argument("--rules", required=True, help="rules database")
    p.add_argument("--threshold", type=_threshold, default=settings.threshold,
                   help="minimum fraction of a class's records an assertion must hold in (default %(default)s)")
    p.add_argument("--task", choices=[k.value for k in TaskKind], default=settings.mining_task.value,
                   help="label column to mine against")
    p.add_argument("--candidates", default=None,
                   help="comma-separated candidate assertion ids (default: the rules' proxy list)")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads, one class per task")
    p.add_argument("--out", required=True, help="where to write the proxy map (JSON)")
    p.set_defaults(handler=cmd_mine)

    p = sub.add_parser("ft", parents=[common], help="run the fine-tuning loop on the simulation scenario")
    p.add_argument("--mode", action="append", choices=[m.value for m in FtMode],
                   help="selection mode; repeat to run several (default from config)")
    p.add_argument("--config", default=None, help="run configuration (.json or .ini)")
    p.add_argument("--seed", type=int, default=None, help="seed of the first run")
    p.add_argument("--seeds", type=_positive_int, default=None, help="sweep over N consecutive seeds")
    p.add_argument("--no-aux", action="store_true", default=None, help="check the main recognizer only")
    p.add_argument("--rules", default=None, help="scenario rules (default: the shipped scenario)")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads for seed sweeps")
    p.add_argument("--ledger", default=None, help="sqlite ledger of finished runs; recorded runs are reused")
    p.add_argument("--report", default=None, help="write the report (or sweep) JSON here")
    p.set_defaults(handler=cmd_ft)

    for name, handler, helptext in (("check", cmd_check, "print the consistency verdict for one segment"),
                                    ("justify", cmd_justify, "explain the verdict for one segment")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--rules", required=True, help="rules database")
        source = p.add_mutually_exclusive_group(required=True)
        source.add_argument("--groundings", help="groundings file for the segment")
        source.add_argument("--frames", help="frame-stream JSON for the segment, smoothed then unioned")
        p.add_argument("--buffer-k", type=_positive_int, default=settings.buffer_k,
                       help="temporal filter window for --frames (default %(default)s)")
        p.add_argument("--m-class", type=int, required=True, help="main recognizer output class")
        p.add_argument("--a-class", type=int, default=None, help="auxiliary recognizer output class")
        p.add_argument("--no-aux", action="store_true", help="check the main recognizer only")
        p.add_argument("--proxy-main", default=None, help="mined main proxy map (default: rules implications)")
        p.add_argument("--proxy-aux", default=None, help="mined aux proxy map (default: rules implications)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("gen", parents=[common], help="generate FTD/ED/TEST groundings and manifests")
    p.add_argument("--rules", required=True, help="rules database")
    p.add_argument("--counts", type=_counts, default=10, help="FTD segments: N per class or CLASS=N,...")
    p.add_argument("--ed-counts", type=_counts, default=None, help="ED segments (default: --counts)")
    p.add_argument("--test-counts", type=_counts, default=None, help="TEST segments (default: --counts)")
    p.add_argument("--noise", type=_noise, default=settings.scenario.noise, help="atom drop/insert rate")
    p.add_argument("--seed", type=int, default=settings.ft.seed)
    p.add_argument("--eval-batch-size", type=_positive_int, default=settings.scenario.eval_batch_size)
    p.add_argument("--clutter", type=int, default=0, help="background objects per segment")
    p.add_argument("--frames", type=_positive_int, default=None, help="also write an N-frame stream per segment")
    p.add_argument("--flip-rate", type=_noise, default=0.05, help="per-frame category flip rate in streams")
    p.add_argument("--dropout-rate", type=_noise, default=0.02, help="per-frame missed detection rate in streams")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing output files")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("compare", parents=[common], help="compare two reports or sweeps")
    p.add_argument("--report", action="append", required=True, help="report or sweep JSON; give exactly two")
    p.add_argument("--label-a", default=None, help="mode label to take from the first file")
    p.add_argument("--label-b", default=None, help="mode label to take from the second file")
    p.set_defaults(handler=cmd_compare)
    return parser


def _emit(args, text: str, data) -> None:
    if args.format == "json":
        sys.stdout.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def cmd_mine(args, settings: Settings) -> int:
    rules = load_rules(args.rules)
    task = TaskKind(args.task)
    if args.candidates:
        ids = [c.strip() for c in args.candidates.split(",") if c.strip()]
    else:
        ids = list(rules.task_spec.proxy_ids) or list(rules.assertions)
    unknown = [c for c in ids if c not in rules.assertions]
    if unknown:
        raise ConfigurationError(f"Unknown candidate assertion(s): {', '.join(unknown)}")
    records = load_labeled_records(args.manifest, rules, task)
    pm = mine_proxies(records, [rules.assertions[c] for c in ids], args.threshold, rules, task, args.workers)
    pm.save(args.out)
    lines = [f"{task.value} proxy map at threshold {pm.threshold} written to {args.out}"]
    for class_id, freqs in sorted(pm.frequencies.items()):
        lines.append(f"class {class_id}: {', '.join(sorted(pm.per_class[class_id])) or '(none)'}")
        for assertion_id, freq in sorted(freqs.items()):
            mark = "*" if assertion_id in pm.per_class[class_id] else " "
            lines.append(f"  {mark} {assertion_id:<16} {freq} ({float(freq):.3f})")
    _emit(args, "\n".join(lines), pm.to_dict())
    return EXIT_OK


def cmd_ft(args, settings: Settings) -> int:
    ft, scenario_cfg = settings.ft, settings.scenario
    if args.config:
        ft, scenario_cfg = load_run_config(args.config, settings)
    modes = [FtMode.parse(m) for m in args.mode] if args.mode else [ft.mode]
    no_aux = ft.no_aux if args.no_aux is None else args.no_aux
    seed = ft.seed if args.seed is None else args.seed
    configs = [FtConfig(m, ft.batch_size, ft.max_iterations, ft.time_budget, ft.improvement_epsilon, seed, no_aux)
               for m in modes]
    rules = rules_text = None
    if args.rules:
        rules, rules_text = load_rules(args.rules), Path(args.rules).read_text(encoding="utf-8")

    if args.seeds is None and len(configs) == 1 and not args.ledger:
        scenario = build_scenario(seed, scenario_cfg, rules, rules_text)
        report = run_ft_loop(configs[0], scenario.rules, scenario.proxies, (scenario.main, scenario.aux),
                             scenario.dataset.ftd, scenario.dataset.ed, scenario.dataset.test,
                             fixture=fixture_hash(scenario.rules_text))
        data = report.to_dict()
        if args.report:
            Path(args.report).write_text(report.to_json(), encoding="utf-8")
        text = (f"{data['mode']} seed {seed}: n_b={data['nB']} n_e={data['nE']} cif={data['cif'] or 'undefined'} "
                f"test accuracy main={data['testAccuracyMain']:.4f} aux={data['testAccuracyAux']:.4f} "
                f"stop={data['stopReason']}")
        _emit(args, text, data)
        return EXIT_OK

    seeds = list(range(seed, seed + (args.seeds or 1)))
    ledger = RunLedger(args.ledger) if args.ledger else None
    sweep = run_sweep(configs, seeds, scenario_cfg, workers=args.workers, ledger=ledger, rules=rules,
                      rules_text=rules_text)
    if args.report:
        Path(args.report).write_text(sweep.to_json(), encoding="utf-8")
    summary = sweep.summary()
    lines = [f"{len(seeds)} seed(s) starting at {seed}"]
    for label, s in summary.items():
        lines.append(f"{label:<22} runs={s['runs']} cif={_fmt(s['cifMean'])}±{_fmt(s['cifStd'])} "
                     f"acc={_fmt(s['testAccuracyMainMean'])}±{_fmt(s['testAccuracyMainStd'])}")
    _emit(args, "\n".join(lines), summary)
    return EXIT_OK


def _proxies(args, rules) -> ProxyPair:
    main = ProxyMap.load(args.proxy_main, rules) if args.proxy_main else proxy_map_from_rules(rules, TaskKind.MAIN)
    aux = ProxyMap.load(args.proxy_aux, rules) if args.proxy_aux else proxy_map_from_rules(rules, TaskKind.AUX)
    return ProxyPair(main, aux)


def _evaluation(args):
    rules = load_rules(args.rules)
    if args.a_class is None and not args.no_aux:
        raise ConfigurationError("--a-class is required unless --no-aux is given")
    if args.frames:
        segment_id, frames = load_frames(args.frames, rules)
        grounding = SegmentGrounder(rules, args.buffer_k).reduce(frames)
    else:
        segment_id, grounding = Path(args.groundings).stem, load_groundings(args.groundings, rules)
    return rules, SegmentEvaluation(segment_id, args.m_class, args.a_class, grounding)


def cmd_check(args, settings: Settings) -> int:
    rules, ev = _evaluation(args)
    proxies = _proxies(args, rules)
    verdict = check_segment_no_aux(ev, rules, proxies) if args.no_aux else check_segment(ev, rules, proxies)
    lines = [f"{ev.segment_id}: {'consistent' if verdict.consistent else 'inconsistent'}"]
    if not args.no_aux:
        lines.append(f"  condition A: {'ok' if verdict.condition_a else 'FAILED'}")
    lines.append(f"  condition B: {'ok' if verdict.condition_b else 'FAILED'}"
                 + (f" (offending: {', '.join(sorted(verdict.offending_main))})" if verdict.offending_main else ""))
    if not args.no_aux:
        lines.append(f"  condition C: {'ok' if verdict.condition_c else 'FAILED'}"
                     + (f" (offending: {', '.join(sorted(verdict.offending_aux))})" if verdict.offending_aux else ""))
    if verdict.implicated:
        lines.append("  implicated: " + ", ".join(f"{k.value} {c}" for k, c in sorted(verdict.implicated)))
    _emit(args, "\n".join(lines), verdict.to_dict())
    return EXIT_OK if verdict.consistent else EXIT_INCONSISTENT


def cmd_justify(args, settings: Settings) -> int:
    rules, ev = _evaluation(args)
    justification = justify(ev, rules, _proxies(args, rules), no_aux=args.no_aux)
    _emit(args, justification.to_text(), justification.to_dict())
    return EXIT_OK if justification.reliable else EXIT_INCONSISTENT


def cmd_gen(args, settings: Settings) -> int:
    rules = load_rules(args.rules)
    classes = rules.task_spec.class_ids(TaskKind.MAIN)

    def expand(counts):
        return {c: counts for c in classes} if isinstance(counts, int) else counts

    counts = expand(args.counts)
    dataset = generate_dataset(
        rules, counts, args.noise, args.seed,
        ed_counts=expand(args.ed_counts) if args.ed_counts is not None else None,
        test_counts=expand(args.test_counts) if args.test_counts is not None else None,
        eval_batch_size=args.eval_batch_size, clutter_objects=args.clutter)

    out = Path(args.out_dir)
    splits: Dict[str, List[tuple]] = {
        "ftd": [(s, None) for s in dataset.ftd],
        "ed": [(s, k) for k, b in enumerate(dataset.ed) for s in b.segments],
        "test": [(s, None) for s in dataset.test],
    }
    targets = [out / f"{name}.json" for name in splits]
    targets += [out / name / f"{s.segment_id}.groundings" for name, segs in splits.items() for s, _ in segs]
    if args.frames:
        targets += [out / name / f"{s.segment_id}.frames.json" for name, segs in splits.items() for s, _ in segs]
    existing = [str(t) for t in targets if t.exists()]
    if existing and not args.force:
        raise ConfigurationError(f"Refusing to overwrite {len(existing)} existing file(s) such as {existing[0]}; "
                                 f"pass --force")
    provenance = {"rulesHash": fixture_hash(Path(args.rules).read_bytes()), "seed": args.seed, "noise": args.noise}
    for name, segs in splits.items():
        (out / name).mkdir(parents=True, exist_ok=True)
        entries = []
        for seg, batch in segs:
            rel = f"{name}/{seg.segment_id}.groundings"
            (out / rel).write_text(print_groundings(seg.grounding), encoding="utf-8")
            frames_rel = None
            if args.frames:
                frames_rel = f"{name}/{seg.segment_id}.frames.json"
                frames = synthesize_frames(seg, args.frames, make_stream(args.seed, "frames", seg.segment_id),
                                           flip_rate=args.flip_rate, dropout_rate=args.dropout_rate)
                save_frames(out / frames_rel, seg.segment_id, frames)
            entries.append(ManifestEntry(seg.segment_id, seg.true_main, seg.true_aux, rel, batch, frames_rel))
        write_manifest(out / f"{name}.json", name, entries, provenance)
    summary = {name: len(segs) for name, segs in splits.items()}
    _emit(args, f"wrote {summary['ftd']} FTD, {summary['ed']} ED ({len(dataset.ed)} batches), "
                f"{summary['test']} TEST segments to {out}", summary)
    return EXIT_OK


def _load_runs(path: str) -> Dict[str, List[dict]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read report {path}: {e}") from None
    if doc.get("schema") == "consistency-ft/sweep":
        return doc["runs"]
    if doc.get("schema") == "consistency-ft/ft-report":
        return {doc["mode"]: [doc]}
    raise ConfigurationError(f"{path} is neither an FT report nor a sweep")


def _pick(runs: Dict[str, List[dict]], label: Optional[str], path: str) -> List[dict]:
    if label is not None:
        if label not in runs:
            raise ConfigurationError(f"{path} has no runs labelled {label!r}; available: {', '.join(sorted(runs))}")
        return runs[label]
    if len(runs) != 1:
        raise ConfigurationError(f"{path} holds several modes ({', '.join(sorted(runs))}); choose one with --label")
    return next(iter(runs.values()))


def _welch(a: Sequence[float], b: Sequence[float]) -> Optional[dict]:
    if len(a) < 2 or len(b) < 2:
        return None
    if np.var(a) == 0 and np.var(b) == 0:
        return {"t": None, "p": None, "note": "both samples constant"}
    result = stats.ttest_ind(a, b, equal_var=False)
    return {"t": round(float(result.statistic), 6), "p": round(float(result.pvalue), 6),
            "note": "significant at 0.05" if result.pvalue < 0.05 else "not significant at 0.05"}


def cmd_compare(args, settings: Settings) -> int:
    if len(args.report) != 2:
        raise ConfigurationError("compare needs exactly two --report files")
    a = _pick(_load_runs(args.report[0]), args.label_a, args.report[0])
    b = _pick(_load_runs(args.report[1]), args.label_b, args.report[1])
    result = {}
    lines = []
    for metric, key in (("cif", "cifValue"), ("testAccuracyMain", "testAccuracyMain"),
                        ("testAccuracyAux", "testAccuracyAux")):
        xs = [r[key] for r in a if r.get(key) is not None]
        ys = [r[key] for r in b if r.get(key) is not None]
        mean_a = float(np.mean(xs)) if xs else None
        mean_b = float(np.mean(ys)) if ys else None
        delta = None if mean_a is None or mean_b is None else round(mean_a - mean_b, 6)
        welch = _welch(xs, ys)
        result[metric] = {"meanA": None if mean_a is None else round(mean_a, 6),
                          "meanB": None if mean_b is None else round(mean_b, 6),
                          "delta": delta, "runsA": len(xs), "runsB": len(ys), "welch": welch}
        line = f"{metric:<17} A={_fmt(mean_a)} B={_fmt(mean_b)} delta={_fmt(delta)}"
        if welch is not None:
            line += f" ({welch['note']}" + (f", p={welch['p']:.4f})" if welch["p"] is not None else ")")
        lines.append(line)
    _emit(args, "\n".join(lines), result)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        settings = load_config()
    except ConsistencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    setup_logging(args.log_file or settings.log_file, "DEBUG" if args.verbose else settings.log_level)
    try:
        return args.handler(args, settings)
    except ConsistencyError as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
