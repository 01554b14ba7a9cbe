"""Command line entry point: ``crest track | eval | ablate | selfcheck``.

Configuration is resolved as defaults < config file < command-line flags.
The seed falls back to ``$CREST_SEED`` when neither the file nor a flag sets it.
Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import container, evaluation, selfcheck
from .evaluation import SequenceLoadError, SynthSpec
from .tracker import CrestTracker, TrackerConfig

log = logging.getLogger("crest")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
ABLATION_MODES = ("base", "spatial", "spatiotemporal")
_RUN_KEYS = {"jobs": int, "out": str, "dump_responses": bool}


class UsageError(Exception):
    pass


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if key == "scale_set":
        return tuple(float(v) for v in raw.split(","))
    if kind == "float | None":
        return None if raw.lower() == "none" else float(raw)
    try:
        return {"int": int, "float": float, "str": str}.get(kind, kind)(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None


def _field_kinds() -> dict:
    kinds = {}
    for f in dataclasses.fields(TrackerConfig):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        kinds[f.name] = {"bool": bool}.get(t, t)
    kinds.update(_RUN_KEYS)
    return kinds


def parse_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    kinds = _field_kinds()
    values = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in kinds:
            raise UsageError(f"{p}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, kinds[key])
    return values


@dataclasses.dataclass
class RunConfig:
    tracker: TrackerConfig
    jobs: int = 1
    out: str = "crest_out"
    dump_responses: bool = False

    def to_dict(self) -> dict:
        return {"tracker": self.tracker.to_dict(), "jobs": self.jobs, "out": self.out,
                "dump_responses": self.dump_responses}


def resolve_config(args) -> RunConfig:
    values = parse_config_file(args.config) if args.config else {}
    if "seed" not in values and os.environ.get("CREST_SEED"):
        try:
            values["seed"] = int(os.environ["CREST_SEED"])
        except ValueError:
            raise UsageError(f"CREST_SEED must be an integer, got {os.environ['CREST_SEED']!r}") from None
    flags = {
        "seed": args.seed, "profile": args.profile, "branches": args.branches,
        "beta": args.beta, "update_period": args.update_period, "init_max_iters": args.init_iters,
        "jobs": args.jobs, "out": args.out,
    }
    if args.scales is not None:
        try:
            flags["scale_set"] = tuple(float(s) for s in args.scales.split(","))
        except ValueError:
            raise UsageError(f"--scales: cannot parse {args.scales!r}") from None
    if args.strict_paper:
        flags["strict_paper"] = True
    if args.dump_responses:
        flags["dump_responses"] = True
    if args.no_scale:
        flags["scale_estimation"] = False
    values.update({k: v for k, v in flags.items() if v is not None})
    run = {k: values.pop(k) for k in list(values) if k in _RUN_KEYS}
    try:
        tracker = TrackerConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return RunConfig(tracker, **run)


def _sequences(args) -> list:
    seqs = []
    for path in getattr(args, "sequence", None) or []:
        try:
            seqs.append(evaluation.load_sequence(path))
        except SequenceLoadError as exc:
            raise UsageError(str(exc)) from None
    for text in args.synth or []:
        try:
            seqs.append(evaluation.synth_sequence(SynthSpec.parse(text)))
        except ValueError as exc:
            raise UsageError(f"--synth: {exc}") from None
    if not seqs:
        raise UsageError("give a sequence directory or --synth SPEC")
    return seqs


def _write_run_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def format_boxes(predictions) -> str:
    return "".join(",".join(repr(float(v)) for v in box) + "\n" for box in predictions)


def cmd_track(args) -> int:
    cfg = resolve_config(args)
    seqs = _sequences(args)
    if len(seqs) != 1:
        raise UsageError("track takes exactly one sequence")
    seq = seqs[0]
    out = Path(cfg.out)
    _write_run_config(out, cfg)
    tracker = CrestTracker(cfg.tracker)
    resp_dir = out / "responses"
    if cfg.dump_responses:
        resp_dir.mkdir(parents=True, exist_ok=True)

    def on_frame(i, result):
        if cfg.dump_responses:
            container.save(resp_dir / f"{i + 1:04d}.resp", {"response": result.response},
                           {"kind": "response", "frame": i + 1, "config": cfg.tracker.to_dict()})

    result = evaluation.run_ope(cfg.tracker, seq, lambda: tracker, on_frame)
    (out / "boxes.txt").write_text(format_boxes(result.predictions))
    # tracker settings only, so snapshots do not depend on the output path
    tracker.state.model.save(out / "model.crest", {"config": cfg.tracker.to_dict()})
    evaluation.write_results(result, out, cfg.to_dict())
    print(f"{seq.name}: {len(seq)} frames, AUC {result.auc:.3f}, precision@20 {result.precision_at_20:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    seqs = _sequences(args)
    out = Path(cfg.out)
    _write_run_config(out, cfg)
    results = evaluation.run_many(cfg.tracker, seqs, cfg.jobs)
    rows = []
    for res in results:
        evaluation.write_results(res, out, cfg.to_dict())
        rows.append((res.name, res.auc, res.precision_at_20, res.mean_iou))
        print(f"{res.name}: AUC {res.auc:.3f}, precision@20 {res.precision_at_20:.3f}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "auc", "precision_at_20", "mean_iou"])
    w.writerows(rows)
    (out / "summary.csv").write_text(buf.getvalue())
    return EXIT_OK


def ablation_svg(rows: list[dict]) -> str:
    bars = []
    for i, row in enumerate(rows):
        for j, key in enumerate(("auc", "precision_at_20")):
            x = 60 + i * 160 + j * 60
            h = 200 * row[key]
            color = "#2e86c1" if key == "auc" else "#c0392b"
            bars.append(f'<rect x="{x}" y="{230 - h:.1f}" width="50" height="{h:.1f}" fill="{color}"/>')
            bars.append(f'<text x="{x + 25}" y="{225 - h:.1f}" text-anchor="middle" '
                        f'font-size="10">{row[key]:.3f}</text>')
        bars.append(f'<text x="{115 + i * 160}" y="250" text-anchor="middle" '
                    f'font-size="12">{row["branches"]}</text>')
    legend = ('<text x="60" y="20" font-size="12" fill="#2e86c1">AUC</text>'
              '<text x="110" y="20" font-size="12" fill="#c0392b">precision@20</text>')
    return ('<svg xmlns="http://www.w3.org/2000/svg" width="560" height="270">\n'
            + legend + "\n" + "\n".join(bars) + "\n</svg>\n")


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seqs = _sequences(args)
    if len(seqs) != 1:
        raise UsageError("ablate takes exactly one sequence")
    seq = seqs[0]
    out = Path(cfg.out)
    _write_run_config(out, cfg)
    rows = []
    for mode in ABLATION_MODES:
        tcfg = dataclasses.replace(cfg.tracker, branches=mode)
        res = evaluation.run_ope(tcfg, seq)
        rows.append({
            "branches": mode,
            "spatial": mode in ("spatial", "spatiotemporal"),
            "temporal": mode == "spatiotemporal",
            "auc": res.auc,
            "precision_at_20": res.precision_at_20,
            "mean_iou": res.mean_iou,
            "init_final_loss": res.info["init_final_loss"],
            "init_iterations": res.info["init_iterations"],
            "seed": tcfg.seed,
        })
        print(f"{mode:>15}: AUC {res.auc:.3f}, precision@20 {res.precision_at_20:.3f}, "
              f"init loss {res.info['init_final_loss']:.4g}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (out / "ablation.csv").write_text(buf.getvalue())
    (out / "ablation.svg").write_text(ablation_svg(rows))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    faults = [f for f in (args.inject_fault or "").split(",") if f]
    try:
        results = selfcheck.run_checks(faults)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(selfcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser, multi: bool) -> None:
    p.add_argument("sequence", nargs="*" if multi else "?", default=None,
                   help="OTB-style sequence directory")
    p.add_argument("--synth", action="append", metavar="SPEC",
                   help="synthetic sequence, e.g. 'length=50;motion=2,1;scale_drift=0.01;seed=3'")
    p.add_argument("--config", metavar="PATH", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("paper", "desk"))
    p.add_argument("--branches", choices=ABLATION_MODES)
    p.add_argument("--scales", metavar="S1,S2,...")
    p.add_argument("--no-scale", action="store_true", help="disable scale estimation")
    p.add_argument("--beta", type=float)
    p.add_argument("--update-period", type=int, metavar="N", help="0 disables online updates")
    p.add_argument("--init-iters", type=int, metavar="N", help="cap on initial training iterations")
    p.add_argument("--jobs", type=int, metavar="N")
    p.add_argument("--strict-paper", action="store_true",
                   help="no rollback of diverged updates")
    p.add_argument("--dump-responses", action="store_true")
    p.add_argument("--out", metavar="DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crest", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("track", help="track one sequence and write boxes.txt")
    _add_run_flags(p, multi=False)
    p.set_defaults(func=cmd_track)
    p = sub.add_parser("eval", help="one-pass evaluation over sequences")
    _add_run_flags(p, multi=True)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("ablate", help="compare base / +spatial / +spatiotemporal")
    _add_run_flags(p, multi=False)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("selfcheck", help="run gradient, oracle and metric checks")
    p.add_argument("--inject-fault", metavar="NAME", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "sequence", None) is not None and not isinstance(args.sequence, list):
        args.sequence = [args.sequence]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"crest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"crest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
