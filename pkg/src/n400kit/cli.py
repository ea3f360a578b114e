"""Command-line interface.

Every subcommand writes its outputs plus a ``manifest.json`` recording the
input hashes, seed, tool version and all defaults in effect, so a run can be
repeated bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path


from . import __version__, ingest, lmm, pipeline, report, stats, synth
from .errors import ConfigError, InputError, N400KitError

DEFAULTS = {
    "window_ms": list(ingest.DEFAULT_WINDOW),
    "holdout_fraction": 0.15,
    "fdr": "BY",
    "log_base": "e",
    "random_intercepts": list(pipeline.DEFAULT_RANDOM),
    "contrast_rois": list(pipeline.N400_ROIS),
    "contrast_direction": "less",
    "prediction_mode": "conditional",
    "optimizer": {"method": "Nelder-Mead", "theta0": 1.0, "fatol": 1e-8, "xatol": 1e-6,
                  "max_iter": 500, "singular_threshold": lmm.SINGULAR_THRESHOLD},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check_inputs(paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise InputError(f"input file not found: {p}")


def _out_dir(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_manifest(out, args, inputs, outputs, extra=None):
    arguments = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "tool": "n400kit",
        "version": __version__,
        "command": args.command,
        "arguments": arguments,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "seed": getattr(args, "seed", None),
        "defaults": DEFAULTS,
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    Path(out, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def _parse_base(text):
    if text in ("e", "E"):
        return math.e
    try:
        base = float(text)
    except ValueError:
        raise ConfigError(f"invalid log base {text!r}") from None
    if not (base > 0 and base != 1):
        raise ConfigError(f"invalid log base {text!r}")
    return base


def _load_table(path):
    _check_inputs([path])
    return ingest.read_table(path)


def _pairs(items, sep="="):
    out = []
    for item in items or []:
        left, s, right = item.partition(sep)
        if not s or not left or not right:
            raise ConfigError(f"expected LEFT{sep}RIGHT, got {item!r}")
        out.append((left.strip(), right.strip()))
    return out


# ---------------------------------------------------------------- commands


def cmd_metrics(args):
    lm_paths = args.lm or []
    if not lm_paths:
        raise ConfigError("metrics needs at least one --lm file")
    _check_inputs([args.stimuli, *lm_paths, args.eeg, args.epochs])
    if args.eeg and args.epochs:
        raise ConfigError("give either --eeg or --epochs, not both")
    base = _parse_base(args.base)
    stimuli = ingest.parse_stimuli(args.stimuli)
    records = [r for p in lm_paths for r in ingest.parse_lm_output(p)]
    out = _out_dir(args)
    recipes = args.predictor or None
    if args.eeg or args.epochs:
        if args.eeg:
            trials = ingest.read_trials(args.eeg)
        else:
            trials = ingest.read_epochs(args.epochs, tuple(args.window))
        table = ingest.build_analysis_table(stimuli, records, trials, recipes, base)
        name = "table.csv"
    else:
        table = ingest.stimulus_predictors(stimuli, records, recipes, base)
        name = "stimulus_predictors.csv"
    ingest.write_table(table, out / name)
    per_stim = table.drop_duplicates(subset=["frame_id", "condition"])
    pred_cols = [c for c in per_stim.columns
                 if c.split("_", 1)[0] in ("surprisal", "cossim", "cosdist") or c == "cloze"]
    for col in pred_cols:
        parts = []
        for cond in ingest.CONDITIONS:
            vals = per_stim.loc[per_stim["condition"] == cond, col]
            if len(vals) >= 2:
                m, sd = stats.mean_sd(vals)
                parts.append(f"{cond} {m:.3f} ± {sd:.3f}")
        print(f"{col}: " + "; ".join(parts))
    _write_manifest(out, args, [args.stimuli, *lm_paths, args.eeg, args.epochs], [name])
    return 0


def _random(args):
    return tuple(args.random.split(",")) if args.random else pipeline.DEFAULT_RANDOM


def cmd_fit(args):
    table = _load_table(args.table)
    terms = ["roi"] + [t for p in (args.predictor or []) for t in (p, f"{p}:roi")]
    if args.no_interaction:
        terms = ["roi"] + list(args.predictor or [])
    spec = lmm.ModelSpec("amplitude", tuple(terms), _random(args))
    model = lmm.fit(table, spec)
    out = _out_dir(args)
    (out / "model.txt").write_text(model.summary_text(), encoding="utf-8")
    sys.stdout.write(model.summary_text())
    _write_manifest(out, args, [args.table], ["model.txt"])
    return 0


def cmd_compare(args):
    table = _load_table(args.table)
    random = _random(args)
    ladders = []
    for p in args.predictor or []:
        if args.ladder == "main":
            ladders.append(pipeline.LadderSpec(p, ((p,),), random_intercepts=random))
        else:
            ladders.append(pipeline.predictor_ladder(p, random_intercepts=random))
    for base, added in _pairs(args.partition):
        ladders.append(pipeline.partition_ladder(base, added, random_intercepts=random))
    if not ladders:
        raise ConfigError("compare needs at least one --predictor or --partition")
    rep = pipeline.run_ladders(table, ladders, fdr_method=args.fdr,
                               drop_redundant=bool(args.partition))
    out = _out_dir(args)
    report.write_csv(rep.to_frame(), out / "ladder.csv")
    report.rebuild_summary(out)
    print(report.ladder_markdown(rep.to_frame()))
    _write_manifest(out, args, [args.table], ["ladder.csv", "summary.md", "fig_aic.svg"])
    return 0


def cmd_holdout(args):
    table = _load_table(args.table)
    if not args.predictor:
        raise ConfigError("holdout needs at least one --predictor")
    random = _random(args)
    specs = {p: lmm.ModelSpec("amplitude", ("roi", p, f"{p}:roi"), random)
             for p in args.predictor}
    between = {}
    for item in args.between or []:
        parts = item.split(":")
        if len(parts) != 4:
            raise ConfigError(f"--between expects COND:MODEL_A:MODEL_B:ALTERNATIVE, got {item!r}")
        cond = ingest.Condition.parse(parts[0]).value
        between[cond] = (parts[1], parts[2], parts[3])
    plan = pipeline.default_plan(list(specs), between=between, alternative=args.direction)
    hold = pipeline.HoldoutSpec(args.holdout_fraction, args.seed, args.stratify)
    rep = pipeline.holdout_eval(table, specs, hold, plan, fdr_method=args.fdr)
    out = _out_dir(args)
    report.write_csv(rep.to_frame(), out / "contrasts.csv")
    report.write_csv(rep.cells, out / "conditions.csv")
    report.rebuild_summary(out)
    print(report.contrasts_markdown(rep.to_frame(), rep.cells))
    _write_manifest(out, args, [args.table],
                    ["contrasts.csv", "conditions.csv", "summary.md", "fig_conditions.svg"],
                    {"n_train": rep.n_train, "n_test": rep.n_test})
    return 0


def cmd_corr(args):
    table = _load_table(args.table)
    pairs = _pairs(args.pair)
    if not pairs:
        models = [c[len("surprisal_"):] for c in table.columns if c.startswith("surprisal_")]
        pairs = [(f"surprisal_{m}", f"cossim_{m}") for m in models if f"cossim_{m}" in table.columns]
    if not pairs:
        raise ConfigError("no --pair given and no surprisal_<m>/cossim_<m> columns found")
    named = {p.split("_", 1)[1] if p.startswith("surprisal_") else p: (p, s) for p, s in pairs}
    reports, strongest = pipeline.compare_correlations(table, named)
    out = _out_dir(args)
    report.write_csv(report.correlation_frame(reports), out / "correlation.csv")
    report.write_csv(report.scatter_frame(reports), out / "scatter.csv")
    report.rebuild_summary(out)
    for name, rep in reports.items():
        print(f"{name}: r = {rep.r:.4f} (n = {rep.n})")
    print(f"strongest: {strongest}")
    _write_manifest(out, args, [args.table],
                    ["correlation.csv", "scatter.csv", "summary.md", "fig_scatter.svg"],
                    {"strongest": strongest})
    return 0


def preset_spec(name, seed, n_subjects=10, n_frames=50, n_electrodes=8):
    """Synthetic designs used by ``n400kit synth``.

    ``exp1``: amplitude depends on model A's surprisal (and its ROI interaction);
    ``exp2``: condition-invariant predictor means, within-stimulus correlation
    -0.48 for model A and -0.20 for model B; ``exp3``: amplitude depends on
    model A's surprisal and cosine similarity; ``null``: no predictor effects.
    """
    roi_offsets = {"Prefrontal": 0.5, "Posterior": -1.0, "LeftTemporal": 0.3}
    common = dict(n_subjects=n_subjects, n_frames=n_frames, n_electrodes=n_electrodes,
                  intercept=-1.0, roi_offsets=roi_offsets,
                  random_sd={"subject": 1.5, "frame_id": 1.0, "electrode": 0.5},
                  residual_sd=6.0, seed=seed)
    if name == "exp2":
        flat_s = {c: 8.0 for c in ingest.CONDITIONS}
        flat_c = {c: 0.3 for c in ingest.CONDITIONS}
        fams = (synth.PredictorFamily("A", flat_s, 1.5, flat_c, 0.08, rho=-0.48),
                synth.PredictorFamily("B", flat_s, 1.5, flat_c, 0.08, rho=-0.20))
        return synth.SynthSpec(slopes={"surprisal_A": 0.6}, predictors=fams, **common)
    fams = (synth.PredictorFamily("A", rho=-0.48), synth.PredictorFamily("B", rho=-0.20))
    if name == "exp1":
        return synth.SynthSpec(slopes={"surprisal_A": 0.6},
                               interaction_slopes={"surprisal_A": {"Central": 0.3, "Posterior": 0.4}},
                               predictors=fams, **common)
    if name == "exp3":
        return synth.SynthSpec(slopes={"surprisal_A": 0.6, "cossim_A": -8.0},
                               predictors=fams, **common)
    if name == "null":
        return synth.SynthSpec(predictors=fams, **common)
    raise ConfigError(f"unknown preset {name!r}")


def cmd_synth(args):
    spec = preset_spec(args.preset, args.seed, args.subjects, args.frames, args.electrodes)
    table, truth = synth.generate(spec)
    values = synth.stimulus_table(table)
    stimuli = synth.make_stimuli(spec, values)
    out = _out_dir(args)
    ingest.write_table(table, out / "table.csv")
    ingest.write_table(table[list(ingest.TRIAL_COLUMNS)], out / "eeg.csv")
    with open(out / "stimuli.tsv", "w", encoding="utf-8", newline="") as fh:
        ingest.write_stimuli(stimuli, fh)
    (out / "lm_output.jsonl").write_text(synth.emit_lm_fixture(spec, stimuli, values),
                                         encoding="utf-8")
    (out / "truth.json").write_text(truth.to_json() + "\n", encoding="utf-8")
    (out / "synth_spec.json").write_text(
        json.dumps(synth.spec_to_dict(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(table)} rows, {len(stimuli)} stimuli to {out}")
    _write_manifest(out, args, [], ["table.csv", "eeg.csv", "stimuli.tsv", "lm_output.jsonl",
                                    "truth.json", "synth_spec.json"])
    return 0


def cmd_report(args):
    out = Path(args.out)
    if not out.is_dir():
        raise InputError(f"report directory not found: {out}")
    sys.stdout.write(report.rebuild_summary(out))
    return 0


def build_parser():
    p = _Parser(prog="n400kit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"n400kit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--fdr", choices=("bh", "by", "BH", "BY"), default="by",
                        type=str, help="FDR method (default: by)")
        if seed:
            sp.add_argument("--seed", type=int, required=True)

    m = sub.add_parser("metrics", help="compute predictors and build the analysis table")
    m.add_argument("--stimuli", required=True)
    m.add_argument("--lm", action="append", help="LM output JSONL (repeatable)")
    m.add_argument("--eeg")
    m.add_argument("--epochs")
    m.add_argument("--window", nargs=2, type=float, default=list(ingest.DEFAULT_WINDOW),
                   metavar=("START", "END"))
    m.add_argument("--predictor", action="append",
                   help="recipe surprisal:<model>, cossim:<model> or cloze (repeatable)")
    m.add_argument("--base", default="e", help="log base for surprisal (default: e)")
    common(m)
    m.set_defaults(func=cmd_metrics)

    f = sub.add_parser("fit", help="fit one mixed model")
    f.add_argument("--table", required=True)
    f.add_argument("--predictor", action="append")
    f.add_argument("--no-interaction", action="store_true")
    f.add_argument("--random", help="comma-separated grouping factors")
    common(f)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("compare", help="nested-model ladders with LRTs and AIC")
    c.add_argument("--table", required=True)
    c.add_argument("--predictor", action="append", help="one ladder per predictor")
    c.add_argument("--partition", action="append", metavar="BASE=ADDED",
                   help="does ADDED explain variance beyond BASE x ROI (repeatable)")
    c.add_argument("--ladder", choices=("interaction", "main"), default="interaction")
    c.add_argument("--random")
    common(c)
    c.set_defaults(func=cmd_compare)

    h = sub.add_parser("holdout", help="held-out prediction and condition contrasts")
    h.add_argument("--table", required=True)
    h.add_argument("--predictor", action="append")
    h.add_argument("--holdout-fraction", type=float, default=0.15)
    h.add_argument("--stratify", action="store_true", help="split within each condition")
    h.add_argument("--direction", choices=("less", "greater"), default="less",
                   help="alternative for best<related<unrelated<implausible contrasts")
    h.add_argument("--between", action="append", metavar="COND:MODEL_A:MODEL_B:ALT")
    h.add_argument("--random")
    common(h, seed=True)
    h.set_defaults(func=cmd_holdout)

    r = sub.add_parser("corr", help="stimulus-level predictor/similarity correlation")
    r.add_argument("--table", required=True)
    r.add_argument("--pair", action="append", metavar="PREDICTOR=SIMILARITY")
    common(r)
    r.set_defaults(func=cmd_corr)

    s = sub.add_parser("synth", help="write a synthetic dataset with known truth")
    s.add_argument("--preset", choices=("exp1", "exp2", "exp3", "null"), default="exp1")
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--electrodes", type=int, default=8)
    common(s, seed=True)
    s.set_defaults(func=cmd_synth)

    rp = sub.add_parser("report", help="rebuild summary.md and figures from CSV tables")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "fdr"):
        args.fdr = args.fdr.upper()
    try:
        return args.func(args)
    except N400KitError as exc:
        print(f"n400kit {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"n400kit {args.command}: error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
