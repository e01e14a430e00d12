"""Command-line entry point: ``u2c {synth,fit,predict,eval,verify,regions}``.

Exit codes: 0 success, 2 usage, 3 data or compatibility problem,
4 verification failure, 5 numeric failure. Every report is JSON with a short
human-readable table on standard output; output files carry no timestamps
or absolute paths, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import __version__
from .calibration import FORMS, fit_model, load_model, save_model
from .data_model import Dataset, LinearHead, format_float, load_dataset, load_manifest, validate_compatibility
from .epistemic import KINDS
from .errors import SchemaError, U2CError, VerificationError
from .metrics import DEFAULT_BINS, evaluate
from .predictors import predict_batch, rc_from_scored, score_batch, u2c_from_scored
from .regions import broken_u2c, region_masses, region_report, uncertainty_triples
from .synth import default_config, misspecified_config, overconfident_config, write_benchmark

PRESETS = {"default": default_config, "misspecified": misspecified_config, "overconfident": overconfident_config}
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _pct(x: float) -> str:
    # adding 0.0 turns a rounded -0.0 into 0.0
    return f"{round(100.0 * x, 1) + 0.0:.1f}"


def _nll_text(report) -> str:
    return "inf" if report.nll_infinite else f"{report.nll:.4f}"


# -------------------------------------------------------------------- inputs


def _validation_set(args) -> Dataset:
    if args.val:
        return load_dataset(args.val, split="train-val")
    entries = [e for e in load_manifest(args.manifest) if e.role == "validation"]
    if len(entries) != 1:
        raise SchemaError(f"manifest must list exactly one validation file, found {len(entries)}")
    return load_dataset(entries[0].path, split=entries[0].split)


def _evaluation_sets(args) -> list[tuple[str, Dataset]]:
    """(name, dataset) pairs from ``--eval`` files, then manifest entries."""
    out = []
    for p in args.eval or []:
        out.append((Path(p).stem, load_dataset(p)))
    if args.manifest:
        for e in load_manifest(args.manifest):
            if e.role == "evaluation":
                out.append((Path(e.path).stem, load_dataset(e.path, split=e.split)))
    if not out:
        raise UsageError("no evaluation datasets: pass --eval or --manifest")
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError("evaluation file names must be distinct")
    return out


def _load_head(path) -> LinearHead:
    """A head JSON ``{weights, bias}``, or any JSON object holding one under
    ``head`` (such as a synthetic-benchmark config)."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read head file {path}: {exc}") from None
    if isinstance(data, dict) and "weights" not in data and isinstance(data.get("head"), dict):
        data = data["head"]
    try:
        return LinearHead.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: not a linear head: {exc}") from None


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    overrides = {"seed": args.seed}
    if args.eta is not None:
        overrides["eta"] = args.eta
    if args.n is not None:
        overrides.update(n_val=args.n, n_test=args.n, n_out=args.n)
    cfg = PRESETS[args.preset](**overrides)
    paths = write_benchmark(cfg, args.out)
    for key in sorted(paths):
        print(f"{key:<11} {paths[key].name}")
    return 0


def cmd_fit(args) -> int:
    validation = _validation_set(args)
    head = _load_head(args.head) if args.head else None
    if args.estimator == "ash" and head is None:
        raise UsageError("--estimator ash needs --head")
    model, log = fit_model(
        validation, args.estimator, alpha=args.alpha, form=args.tau_u, hidden=args.hidden,
        seed=args.seed, k=args.k, ash_p=args.ash_p, ash_fill=args.ash_fill, head=head,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    log_path = out.with_name(out.stem + ".log.json")
    _dump(log.to_dict(), log_path)
    print(f"tau        {format_float(log.tau)}")
    print(f"theta      {format_float(log.theta)}")
    print(f"relabeled  {log.relabeled} of {log.m}")
    print(f"loss       {log.final_loss:.6f} ({log.form})")
    status = "ok" if log.grad_check_passed else "FAILED"
    print(f"grad check {status} (max rel err {log.grad_check_max_rel_err:.2e})")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictors = ("rc", "u2c") if args.predictor == "both" else (args.predictor,)
    for name, d in _evaluation_sets(args):
        validate_compatibility(d, model)
        for kind in predictors:
            preds = predict_batch(model, d, kind)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["id", "predicted", "confidence", "region"] + [f"p{j}" for j in range(1, model.c + 2)])
            for i in range(len(d)):
                w.writerow([d.ids[i], int(preds.predicted[i]), format_float(preds.confidence[i]), preds.region[i]]
                           + [format_float(p) for p in preds.probs[i]])
            path = out / f"{name}.{kind}.predictions.csv"
            path.write_text(buf.getvalue(), encoding="utf-8")
            print(f"{name:<16} {kind:<4} {len(d)} records -> {path.name}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    out = Path(args.out)
    summary = {}
    rows = []
    lemma_lines = []
    for name, d in _evaluation_sets(args):
        validate_compatibility(d, model)
        s = score_batch(model, d)
        reports = {
            kind: evaluate(fn(s), d.labels, args.bins, split=d.split, predictor=kind)
            for kind, fn in (("rc", rc_from_scored), ("u2c", u2c_from_scored))
        }
        rc, u2c = reports["rc"], reports["u2c"]
        delta = {"err": u2c.err - rc.err, "ece": u2c.ece - rc.ece}
        entry = {"dataset": name, "split": d.split, "n": len(d), "n_bins": args.bins,
                 "rc": rc.to_dict(), "u2c": u2c.to_dict(), "delta_u2c_minus_rc": delta}
        if d.is_out_domain:
            masses = region_masses(model, d).masses
            b_minus_c = masses["B"] - masses["C"]
            entry["lemma1"] = {"err_rc_minus_u2c": rc.err - u2c.err, "P_B_minus_P_C": b_minus_c,
                               "residual": (rc.err - u2c.err) - b_minus_c}
            lemma_lines.append(
                f"lemma1 {name}: err(RC) - err(U2C) = {rc.err - u2c.err:+.6f}   "
                f"P(B) - P(C) = {b_minus_c:+.6f}   residual {entry['lemma1']['residual']:.1e}"
            )
        _dump(entry, out / f"{name}.metrics.json")
        summary[name] = entry
        rows.append((name, d.split, rc, u2c, delta))
    _dump({"datasets": sorted(summary)}, out / "eval_index.json")

    header = f"{'dataset':<16} {'split':<12} {'err RC':>7} {'err U2C':>8} {'Δerr':>6} " \
             f"{'ece RC':>7} {'ece U2C':>8} {'Δece':>6} {'nll RC':>8} {'nll U2C':>8}"
    print(header)
    print("-" * len(header))
    for name, split, rc, u2c, delta in rows:
        print(f"{name:<16} {split:<12} {_pct(rc.err):>7} {_pct(u2c.err):>8} {_pct(delta['err']):>6} "
              f"{_pct(rc.ece):>7} {_pct(u2c.ece):>8} {_pct(delta['ece']):>6} "
              f"{_nll_text(rc):>8} {_nll_text(u2c):>8}")
    for line in lemma_lines:
        print(line)
    return 0


def _pairs(args, model):
    sets = _evaluation_sets(args)
    for _, d in sets:
        validate_compatibility(d, model)
    ins = [(n, d) for n, d in sets if not d.is_out_domain]
    outs = [(n, d) for n, d in sets if d.is_out_domain]
    if not ins or not outs:
        raise UsageError("need at least one in-domain and one out-domain dataset")
    return [(ni, di, no, do) for ni, di in ins for no, do in outs]


def cmd_verify(args) -> int:
    model = load_model(args.model)
    u2c = broken_u2c if args.inject_fault else u2c_from_scored
    results = {}
    for ni, di, no, do in _pairs(args, model):
        key = f"{ni}|{no}"
        try:
            rep = region_report(model, di, do, n_bins=args.bins, u2c=u2c)
        except VerificationError as exc:
            print(f"{key:<32} FAIL {exc.clause}")
            raise
        results[key] = rep.to_dict()
        lem = rep.lemma1
        print(f"{key:<32} ok   lemma1 residuals {abs(lem.residual_out):.1e} / {abs(lem.residual_in):.1e}, "
              f"lemma2 and {len(rep.ece_lemmas)} region ece clauses hold")
    if args.out:
        _dump({"passed": True, "pairs": results}, Path(args.out) / "theory_report.json")
    return 0


def _quadrant_table(name: str, masses: dict, counts: dict) -> str:
    cell = lambda r: f"{r} {masses[r]:.4f} ({counts[r]})"  # noqa: E731
    lines = [
        f"{name}",
        f"{'':<12}| {'U2C accepts':<22}| {'U2C rejects':<22}",
        f"{'-' * 12}+{'-' * 23}+{'-' * 23}",
        f"{'RC accepts':<12}| {cell('A'):<22}| {cell('B'):<22}",
        f"{'RC rejects':<12}| {cell('C'):<22}| {cell('D'):<22}",
    ]
    return "\n".join(lines)


def cmd_regions(args) -> int:
    model = load_model(args.model)
    out = Path(args.out)
    sets = _evaluation_sets(args)
    report = {}
    for name, d in sets:
        validate_compatibility(d, model)
        rm = region_masses(model, d)
        report[name] = {"split": d.split, **rm.to_dict()}
        print(_quadrant_table(f"{name} ({d.split}, n={rm.n})", rm.masses, rm.counts))
        print()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "u", "confidence", "correct", "region"])
        for rid, u, conf, correct, region in uncertainty_triples(model, d):
            w.writerow([rid, format_float(u), format_float(conf), int(correct), region])
        (out / f"{name}.triples.csv").parent.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.triples.csv").write_text(buf.getvalue(), encoding="utf-8")
    ins = [(n, d) for n, d in sets if not d.is_out_domain]
    outs = [(n, d) for n, d in sets if d.is_out_domain]
    if ins and outs:
        # full report, including the identity checks, for the first pair
        rep = region_report(model, ins[0][1], outs[0][1], n_bins=args.bins)
        report["_lemmas"] = {"in": ins[0][0], "out": outs[0][0], **rep.to_dict()}
    _dump(report, out / "regions.json")
    return 0


# ------------------------------------------------------------------- parser


def _add_model_inputs(p) -> None:
    p.add_argument("--model", required=True, help="model JSON written by fit")
    p.add_argument("--eval", action="append", metavar="CSV", help="evaluation dataset (repeatable)")
    p.add_argument("--manifest", help="manifest JSON; its evaluation entries are used")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="ece bins (default 15)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="u2c", description="Reject-or-classify versus unified uncertainty calibration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic in/out-domain benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--eta", type=float, help="label-noise rate override")
    p.add_argument("--n", type=int, help="records per split override")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit temperature, estimator, threshold and calibrator")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--val", help="validation CSV")
    src.add_argument("--manifest", help="manifest JSON with one validation entry")
    p.add_argument("--out", required=True, help="model JSON path; the log goes next to it")
    p.add_argument("--estimator", choices=KINDS, default="maxlogit")
    p.add_argument("--k", type=int, default=5, help="neighbours for knn")
    p.add_argument("--ash-p", type=float, default=0.1, help="fraction of features kept by ash")
    p.add_argument("--ash-fill", type=float, default=1.0, help="value given to kept features by ash")
    p.add_argument("--head", help="linear head JSON (required by ash)")
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--tau-u", choices=FORMS, default="mlp")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="write per-record RC and/or U2C predictions")
    _add_model_inputs(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--predictor", choices=("rc", "u2c", "both"), default="both")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="err/ece/nll for RC and U2C")
    _add_model_inputs(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="check the RC/U2C error, nll and ece identities")
    _add_model_inputs(p)
    p.add_argument("--out", help="directory for theory_report.json")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("regions", help="A/B/C/D region masses and (u, confidence, correct) triples")
    _add_model_inputs(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_regions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"u2c {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return exc.exit_code
    except U2CError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
