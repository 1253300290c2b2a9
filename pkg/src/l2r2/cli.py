"""``l2r2`` command line: calibrate, fuse, evaluate, select, synth, topk, prior, decompose, report.

Exit codes: 0 success, 2 validation error, 1 runtime error. Every invocation
appends one JSON line (a run record) to ``--run-log``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DEFAULT_BINS,
    cross_entropy,
    expected_calibration_error,
    fit_classwise_temperatures,
    fit_temperature,
    scale_logits,
    softmax,
)
from .core_data import MeanStd, ValidationError, average_seed_runs, load_labels, load_manifest
from .decomposition import (
    DEFAULT_PAD,
    DEFAULT_TAU,
    ViewKind,
    apply_view,
    fallback_gate,
    load_detections,
    load_image,
    save_image,
)
from .fusion import (
    METHODS,
    FusionModel,
    FusionPrediction,
    fit_all,
    fit_fusion,
    load_predictions,
    oracle_accuracy,
    save_predictions,
    select_fusion,
)
from .metadata_prior import estimate_priors, reweight_batch, save_priors
from .metrics import accuracy, evaluate, format_table, macro_accuracy, per_class_delta
from .synthbench import SynthConfig, generate
from .topk import DEFAULT_K, aggregate_all, load_candidates, save_sweep, sweep_k

log = logging.getLogger("l2r2")


@dataclass
class RunRecord:
    command: str
    config: dict
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    exit_code: int = 0


class _Run:
    """Collects inputs and outputs of the current invocation for the run record."""

    def __init__(self):
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def read(self, path) -> Path:
        p = Path(path)
        if p.is_file():
            self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def wrote(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)


def _emit(text: str, out: str | None, run: _Run) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        run.wrote(out)
    else:
        sys.stdout.write(text)


def _manifest(args, run: _Run):
    m = load_manifest(run.read(args.manifest))
    for split in m.splits.values():
        run.read(split)
    return m


def _model_seed(m, args) -> str:
    return str(args.model_seed) if args.model_seed is not None else m.seeds[0]


def _triples(m, a: str, b: str, seed: str, run: _Run):
    out = {}
    for split in ("train", "val", "test"):
        if split not in m.splits:
            continue
        for v in (a, b):
            run.read(m.logit_path(v, split, seed))
        d = m.load_split(split, [a, b], seed)
        out[split] = (d.logits[a], d.logits[b], d.labels, d.ids)
    for split in ("train", "val"):
        if split not in out:
            raise ValidationError(f"fusion needs a {split!r} split in the manifest")
    return out


def _score(m, preds, labels) -> float:
    return macro_accuracy(preds, labels, m.num_classes) if m.imbalanced else accuracy(preds, labels)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args, run: _Run) -> None:
    m = _manifest(args, run)
    seed = _model_seed(m, args)
    run.read(m.logit_path(args.view, args.split, seed))
    d = m.load_split(args.split, [args.view], seed)
    z, y = d.logits[args.view], d.labels
    if args.kind == "global":
        params = fit_temperature(z, y)
    else:
        params = fit_classwise_temperatures(z, y, bins=args.bins)
    before = (cross_entropy(z, y), expected_calibration_error(z, y, args.bins).ece)
    zs = scale_logits(z, params)
    after = (cross_entropy(zs, y), expected_calibration_error(zs, y, args.bins).ece)
    print(f"{args.view}/{args.split}/seed{seed}: CE {before[0]:.4f} -> {after[0]:.4f}, ECE {before[1]:.4f} -> {after[1]:.4f}")
    _emit(params.to_json() + "\n", args.out, run)


def cmd_fuse(args, run: _Run) -> None:
    m = _manifest(args, run)
    seed = _model_seed(m, args)
    data = _triples(m, args.a, args.b, seed, run)
    if args.split not in data:
        raise ValidationError(f"unknown split {args.split!r}; valid splits: {', '.join(sorted(data))}")
    train, val = (t[:3] for t in (data["train"], data["val"]))
    views = (args.a, args.b)
    kw = {"calibration": args.calibration, "macro": m.imbalanced, "num_classes": m.num_classes}
    if args.model:
        model = FusionModel.from_json(run.read(args.model).read_text())
    elif args.method == "auto":
        candidates = fit_all(train, val, views, seed=args.seed, **kw)
        model, val_scores = select_fusion(candidates, val, macro=m.imbalanced, num_classes=m.num_classes)
        rows = {}
        for cand, vs in zip(candidates, val_scores):
            rows[cand.method] = {"val": vs}
            if "test" in data:
                t1, t2, ty, _ = data["test"]
                rows[cand.method]["test"] = _score(m, cand.predict(t1, t2).pred, ty)
        print(f"selected: {model.method}")
        sys.stdout.write(format_table(rows, fmt=args.format))
    elif args.method == "threshold" and args.threshold is not None:
        model = FusionModel("threshold", {"t": args.threshold}, views)
    else:
        model = fit_fusion(args.method, train, val, views, seed=args.seed, **kw)
    z1, z2, y, ids = data[args.split]
    pred = model.predict(z1, z2)
    print(f"{model.method} on {args.split}: accuracy {accuracy(pred.pred, y):.4f}, macro {macro_accuracy(pred.pred, y, m.num_classes):.4f}")
    if args.out:
        save_predictions(run.wrote(args.out), ids, pred)
    if args.model_out:
        run.wrote(args.model_out).write_text(model.to_json() + "\n")


def cmd_eval(args, run: _Run) -> None:
    m = _manifest(args, run)
    ids, pred = load_predictions(run.read(args.predictions))
    labels = m.load_labels(args.split)
    index = {i: n for n, i in enumerate(ids)}
    missing = [i for i in labels.sample_ids if i not in index]
    if missing:
        raise ValidationError(f"prediction file lacks id {missing[0]!r} from split {args.split!r}")
    p = pred.pred[[index[i] for i in labels.sample_ids]]
    rep = evaluate(p, labels.labels, m.num_classes)
    rows = {"predictions": {"micro": rep.micro, "macro": rep.macro}}
    if args.baseline_view:
        seed = _model_seed(m, args)
        run.read(m.logit_path(args.baseline_view, args.split, seed))
        d = m.load_split(args.split, [args.baseline_view], seed)
        bp = np.argmax(d.logits[args.baseline_view], axis=1)
        brep = evaluate(bp, d.labels, m.num_classes)
        rows[args.baseline_view] = {"micro": brep.micro, "macro": brep.macro}
        delta, present = per_class_delta(p, bp, labels.labels, m.num_classes)
        deltas = ", ".join(f"{m.class_names[k]}:{delta[k] * 100:+.2f}" for k in range(m.num_classes) if present[k])
        print(f"per-class delta vs {args.baseline_view}: {deltas}")
    print(f"n={rep.n} classes_present={rep.classes_present}")
    _emit(format_table(rows, args.baseline_view, args.format), args.out, run)


def _select_rows(m, a, b, seeds, run: _Run, calibration: str, rng_seed: int, extra_views=()):
    per_seed = defaultdict(lambda: defaultdict(list))
    records = []
    for seed in seeds:
        data = _triples(m, a, b, seed, run)
        train, val = data["train"][:3], data["val"][:3]
        candidates = fit_all(train, val, (a, b), seed=rng_seed, calibration=calibration,
                             macro=m.imbalanced, num_classes=m.num_classes)
        chosen, _ = select_fusion(candidates, val, macro=m.imbalanced, num_classes=m.num_classes)
        for split in ("val", "test"):
            if split not in data:
                continue
            z1, z2, y, _ = data[split]
            p1, p2 = np.argmax(z1, axis=1), np.argmax(z2, axis=1)
            scores = {a: _score(m, p1, y), b: _score(m, p2, y)}
            for v in extra_views:
                run.read(m.logit_path(v, split, seed))
                scores[v] = _score(m, np.argmax(m.load_split(split, [v], seed).logits[v], axis=1), y)
            for cand in candidates:
                scores[f"{a}+{b}[{cand.method}]"] = _score(m, cand.predict(z1, z2).pred, y)
            scores[f"{a}+{b}[*]"] = _score(m, chosen.predict(z1, z2).pred, y)
            if m.imbalanced:
                scores["oracle"] = macro_accuracy(np.where((p1 == y) | (p2 == y), y, -1), y, m.num_classes)
            else:
                scores["oracle"] = oracle_accuracy([p1, p2], y)
            for name, v in scores.items():
                per_seed[name][split].append(v)
                records.append((name, split, seed, v))
        log.info("seed %s: selected %s", seed, chosen.method)
    rows = {name: {s: average_seed_runs(v) for s, v in cols.items()} for name, cols in per_seed.items()}
    return rows, records


def _write_records(path, records, run: _Run) -> None:
    with run.wrote(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "column", "seed", "value"])
        for name, col, seed, v in records:
            w.writerow([name, col, seed, repr(float(v))])


def cmd_select(args, run: _Run) -> None:
    m = _manifest(args, run)
    seeds = m.seeds if args.model_seed is None else (str(args.model_seed),)
    baseline = args.baseline or args.b
    extra = () if baseline in (args.a, args.b) else (baseline,)
    rows, records = _select_rows(m, args.a, args.b, seeds, run, args.calibration, args.seed, extra)
    if args.per_seed_out:
        _write_records(args.per_seed_out, records, run)
    _emit(format_table(rows, baseline, args.format), args.out, run)


def cmd_synth(args, run: _Run) -> None:
    cfg = SynthConfig(
        num_classes=args.classes,
        num_envs=args.envs,
        per_class=args.per_class,
        rho=args.rho,
        beta_fg=args.beta_fg,
        beta_bg=args.beta_bg,
        noise=args.noise,
        adversarial=not args.no_shift,
        seed=args.seed,
        n_seeds=args.n_seeds,
    )
    path = generate(cfg, args.out)
    for p in sorted(Path(args.out).iterdir()):
        run.wrote(p)
    print(path)


def cmd_topk(args, run: _Run) -> None:
    test = load_candidates(run.read(args.candidates))
    test_labels = _labels_for(test, load_labels(run.read(args.labels)))
    k = args.k
    if args.sweep:
        if not (args.val_candidates and args.val_labels):
            raise ValidationError("--sweep needs --val-candidates and --val-labels")
        val = load_candidates(run.read(args.val_candidates))
        val_labels = _labels_for(val, load_labels(run.read(args.val_labels)))
        k, rows = sweep_k(val, val_labels, test, test_labels, range(1, args.max_k + 1), args.mode)
        if args.sweep_out:
            save_sweep(run.wrote(args.sweep_out), rows)
        for kk, va, ta in rows:
            print(f"k={kk}: val {va:.4f} test {ta:.4f}")
        print(f"selected k={k}")
    pred = aggregate_all(test, args.mode, k)
    full_top1 = aggregate_all(test, args.mode, 1)
    print(f"{args.mode} k={k}: accuracy {accuracy(pred.pred, test_labels):.4f} (FULL top-1 {accuracy(full_top1.pred, test_labels):.4f})")
    if args.out:
        save_predictions(run.wrote(args.out), [c.sample_id for c in test], pred)


def _labels_for(cands, labels) -> np.ndarray:
    index = dict(zip(labels.sample_ids, labels.labels))
    try:
        return np.array([index[c.sample_id] for c in cands], dtype=np.int64)
    except KeyError as e:
        raise ValidationError(f"no label for candidate id {e.args[0]!r}") from None


def cmd_prior(args, run: _Run) -> None:
    m = _manifest(args, run)
    if m.metadata_path is None:
        raise ValidationError("manifest declares no metadata")
    run.read(m.metadata_path)
    if args.column not in m.metadata_columns:
        raise ValidationError(f"unknown metadata column {args.column!r}; declared: {', '.join(m.metadata_columns)}")
    seed = _model_seed(m, args)
    train_labels = m.load_labels(args.train_split)
    meta = m.load_metadata()
    priors = estimate_priors(
        train_labels.labels, meta.select(train_labels.sample_ids)[args.column], m.num_classes,
        args.column, args.smoothing,
    )
    run.read(m.logit_path(args.view, args.split, seed))
    d = m.load_split(args.split, [args.view], seed, with_metadata=True)
    probs = softmax(d.logits[args.view])
    post = reweight_batch(probs, d.metadata[args.column], priors)
    before, after = np.argmax(probs, axis=1), np.argmax(post, axis=1)
    rows = {
        args.view: {"micro": accuracy(before, d.labels), "macro": macro_accuracy(before, d.labels, m.num_classes)},
        f"{args.view}+{args.column}": {
            "micro": accuracy(after, d.labels),
            "macro": macro_accuracy(after, d.labels, m.num_classes),
        },
    }
    sys.stdout.write(format_table(rows, args.view, args.format))
    if args.priors_out:
        save_priors(run.wrote(args.priors_out), priors)
    if args.out:
        conf = post[np.arange(len(after)), after]
        save_predictions(run.wrote(args.out), d.ids, FusionPrediction(after, conf, np.full(len(after), "blended")))


def cmd_decompose(args, run: _Run) -> None:
    dets_by_id = defaultdict(list)
    for d in load_detections(run.read(args.detections)):
        dets_by_id[d.sample_id].append(d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = ViewKind(args.view)
    images = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in (".png", ".raw"))
    if not images:
        raise ValidationError(f"no .png or .raw images in {args.images}")
    n_fallback = 0
    for p in images:
        image = load_image(run.read(p))
        det = fallback_gate(dets_by_id.get(p.stem, []), args.tau)
        if det is None and kind is not ViewKind.FULL:
            result = apply_view(ViewKind.FULL, image)
            n_fallback += 1
        else:
            result = apply_view(kind, image, det, args.pad)
        save_image(run.wrote(out / p.name), result)
    print(f"{len(images)} images -> {out} ({kind.value}); {n_fallback} fell back to full")


def cmd_report(args, run: _Run) -> None:
    values = defaultdict(lambda: defaultdict(list))
    for path in args.inputs:
        with run.read(path).open(newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            need = {"name", "column", "value"}
            if not need.issubset(reader.fieldnames or ()):
                raise ValidationError(f"{path}: expected columns name,column,seed,value")
            for r in reader:
                values[r["name"]][r["column"]].append(float(r["value"]))
    rows: dict[str, dict[str, MeanStd]] = {
        name: {c: average_seed_runs(v) for c, v in cols.items()} for name, cols in values.items()
    }
    _emit(format_table(rows, args.baseline, args.format), args.out, run)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="l2r2", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--run-log", default=os.environ.get("L2R2_RUN_LOG", "l2r2_runs.jsonl"))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    _add_parser = sub.add_parser

    def add_parser(*a, **kw):
        sp = _add_parser(*a, **kw)
        # also accepted after the subcommand; SUPPRESS keeps the top-level value otherwise
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        return sp

    sub.add_parser = add_parser

    def manifest_args(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--model-seed", help="manifest seed id to use (default: the first)")

    def fmt(sp):
        sp.add_argument("--format", choices=("md", "csv"), default="md")

    sp = sub.add_parser("calibrate", help="fit global or class-wise temperatures")
    manifest_args(sp)
    sp.add_argument("--view", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--kind", choices=("global", "classwise"), default="global")
    sp.add_argument("--bins", type=int, default=DEFAULT_BINS)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("fuse", help="fit and apply one fusion method")
    manifest_args(sp)
    sp.add_argument("--a", required=True, help="input 1 (protected) view")
    sp.add_argument("--b", required=True, help="input 2 view")
    sp.add_argument("--method", choices=METHODS + ("auto",), default="auto")
    sp.add_argument("--split", default="test")
    sp.add_argument("--calibration", choices=("global", "classwise"), default="global")
    sp.add_argument("--threshold", type=float, help="fixed threshold for --method threshold")
    sp.add_argument("--model", help="apply a saved fusion model JSON instead of fitting")
    sp.add_argument("--model-out")
    sp.add_argument("--out")
    fmt(sp)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("eval", help="metrics for a predictions CSV")
    manifest_args(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--baseline-view")
    sp.add_argument("--out")
    fmt(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("select", help="all fusion methods plus the validation-selected one, averaged over seeds")
    manifest_args(sp)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--calibration", choices=("global", "classwise"), default="global")
    sp.add_argument("--baseline", help="row to compute deltas against (default: --b)")
    sp.add_argument("--per-seed-out", help="CSV of per-seed values, input for `report`")
    sp.add_argument("--out")
    fmt(sp)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("synth", help="generate a synthetic correlated FG/BG dataset")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--envs", type=int)
    sp.add_argument("--per-class", type=int, default=500)
    sp.add_argument("--rho", type=float, default=1.0)
    sp.add_argument("--beta-fg", type=float, default=4.0)
    sp.add_argument("--beta-bg", type=float, default=4.0)
    sp.add_argument("--noise", type=float, default=1.0)
    sp.add_argument("--n-seeds", type=int, default=1)
    sp.add_argument("--no-shift", action="store_true", help="keep the class-environment map at test time")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("topk", help="top-k candidate rescoring without ground-truth prompts")
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--k", type=int, default=DEFAULT_K)
    sp.add_argument("--mode", choices=("three_way", "two_way"), default="three_way")
    sp.add_argument("--sweep", action="store_true", help="choose k on validation candidates")
    sp.add_argument("--max-k", type=int, default=10)
    sp.add_argument("--val-candidates")
    sp.add_argument("--val-labels")
    sp.add_argument("--sweep-out")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_topk)

    sp = sub.add_parser("prior", help="fit metadata priors and reweight one view")
    manifest_args(sp)
    sp.add_argument("--column", required=True)
    sp.add_argument("--view", default="fg")
    sp.add_argument("--split", default="test")
    sp.add_argument("--train-split", default="train")
    sp.add_argument("--smoothing", type=float, default=1.0)
    sp.add_argument("--priors-out")
    sp.add_argument("--out")
    fmt(sp)
    sp.set_defaults(func=cmd_prior)

    sp = sub.add_parser("decompose", help="build FG/BG views for a folder of images")
    sp.add_argument("--images", required=True)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--view", choices=[k.value for k in ViewKind], required=True)
    sp.add_argument("--tau", type=float, default=DEFAULT_TAU)
    sp.add_argument("--pad", type=int, default=DEFAULT_PAD)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("report", help="aggregate per-seed results into mean ± std tables")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--baseline")
    sp.add_argument("--out")
    fmt(sp)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    run = _Run()
    start = time.perf_counter()
    code = 0
    try:
        args.func(args, run)
    except ValidationError as e:
        print(f"l2r2 {args.command}: error: {e}", file=sys.stderr)
        code = 2
    except Exception as e:  # noqa: BLE001
        print(f"l2r2 {args.command}: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        code = 1
    record = RunRecord(
        command=args.command,
        config={k: v for k, v in vars(args).items() if k != "func"},
        input_hashes=run.inputs,
        outputs=run.outputs,
        wall_time=time.perf_counter() - start,
        exit_code=code,
    )
    if args.run_log:
        try:
            with open(args.run_log, "a", encoding="utf-8") as f:
                f.write(json.dumps(asdict(record), default=str) + "\n")
        except OSError as e:
            log.warning("could not write run record: %s", e)
    return code


if __name__ == "__main__":
    sys.exit(main())
