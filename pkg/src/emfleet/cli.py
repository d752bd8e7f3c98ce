"""Command-line entry point: simulate -> fit/score -> explain -> consistency -> embed.

Exit codes: 0 success, 2 configuration, 3 data shape, 4 lookup, 5 constraint.
Every command writes its outputs plus one ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from emfleet import __version__, ecod, representation, scoring, synth
from emfleet.errors import ConfigError, ConstraintError, EmfleetError, SampleLookupError
from emfleet.telemetry import FORMATS, load_dataset, save_dataset

log = logging.getLogger("emfleet")

EXIT_OK, EXIT_CONFIG, EXIT_SHAPE, EXIT_LOOKUP, EXIT_CONSTRAINT = 0, 2, 3, 4, 5


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str, outputs: list) -> None:
    path.write_text(text, encoding="utf-8", newline="")
    outputs.append(path)


def _write_manifest(out: Path, command: str, args: argparse.Namespace, inputs, outputs, seed, started):
    """One manifest per command; only ``wall_time_s`` varies between identical reruns."""
    options = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "command", "verbose")
    }
    canon = json.dumps({"command": command, "options": options}, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "tool_version": __version__,
        "options": options,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(outputs)},
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _threshold(args) -> ecod.Threshold:
    try:
        if args.absolute is not None:
            return ecod.Threshold.absolute(args.absolute)
        return ecod.Threshold.contamination(args.contamination)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _percentiles(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad percentile list {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("percentiles must be fractions in (0, 1]")
    return vals


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    inputs = []
    if args.config:
        cfg = synth.load_config(args.config)
        inputs.append(Path(args.config))
    else:
        cfg = synth.PRESETS[args.preset]()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.inject is not None:
        overrides["injection"] = synth.InjectionSpec(
            fraction=args.inject,
            boost=args.boost,
            window=tuple(args.window) if args.window else None,
            mode=args.inject_mode,
        )
    if overrides:
        doc = cfg.to_dict()
        if "injection" in overrides:
            inj = overrides.pop("injection")
            doc["injection"] = {"fraction": inj.fraction, "boost": inj.boost, "window": inj.window, "mode": inj.mode}
        doc.update(overrides)
        cfg = synth.config_from_dict(doc)
    dataset, truth = synth.simulate(cfg)
    out = _prepare_out(args.out)
    outputs: list[Path] = []
    data_path = out / f"fleet.{args.format}"
    save_dataset(dataset, data_path, args.format)
    outputs.append(data_path)
    _write(out / "truth.json", truth.to_json(), outputs)
    _write(out / "config.json", cfg.to_json(), outputs)
    _write_manifest(out, "simulate", args, inputs, outputs, cfg.seed, started)
    print(f"wrote {dataset.n} records ({cfg.population} SSDs x {cfg.checkpoints} checkpoints, d={cfg.d}) to {data_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.perf_counter()
    dataset = load_dataset(args.dataset, args.format)
    crit = {}
    if args.workload_class is not None:
        crit["workload_class"] = args.workload_class
    if args.checkpoint is not None:
        crit["checkpoint"] = args.checkpoint
    part = dataset.filter(**crit) if crit else dataset
    model = ecod.fit(part)
    out = _prepare_out(args.out)
    outputs: list[Path] = []
    _write(out / "model.json", model.to_json() + "\n", outputs)
    _write_manifest(out, "fit", args, [Path(args.dataset)], outputs, None, started)
    print(f"fitted model on n={model.n}, d={model.d}")
    return EXIT_OK


def cmd_score(args) -> int:
    started = time.perf_counter()
    dataset = load_dataset(args.dataset, args.format)
    threshold = _threshold(args)
    inputs = [Path(args.dataset)]
    model = None
    if args.model:
        model = ecod.EcodModel.from_json(Path(args.model).read_text(encoding="utf-8"), expected_d=dataset.d)
        inputs.append(Path(args.model))
    pops = scoring.score_fleet(
        dataset,
        threshold=threshold,
        percentiles=args.percentiles,
        percentile_scope="pooled" if args.pooled_percentiles else "class",
        model=model,
        workers=args.workers,
    )
    out = _prepare_out(args.out)
    outputs: list[Path] = []
    summary = []
    text = []
    for pop in pops:
        stem = scoring.population_stem(pop)
        _write(out / f"scored_{stem}.json", pop.to_json(), outputs)
        hist = scoring.score_histogram(pop, args.bins)
        _write(out / f"hist_{stem}.csv", hist.to_csv(), outputs)
        _write(out / f"percentiles_{stem}.csv", scoring.percentile_csv(pop), outputs)
        top = scoring.rank_extrinsic(pop, args.k)
        summary.append({
            "workload_class": pop.workload_class,
            "checkpoint": pop.checkpoint,
            "n": pop.n,
            "flagged": len(pop.flagged_ids()),
            "threshold": threshold.to_dict(),
            "top": [
                {"rank": r.rank, "sample_id": r.sample_id, "aggregate": r.aggregate,
                 "flagged": r.flagged, "causal_steps": list(r.causal_steps)}
                for r in top
            ],
        })
        rows = [[str(r.rank), r.sample_id, f"{r.aggregate:.6f}", str(r.flagged),
                 " ".join(map(str, r.causal_steps)) or "-"] for r in top]
        text.append(
            f"== {pop.workload_class} checkpoint {pop.checkpoint}: n={pop.n} flagged={len(pop.flagged_ids())}\n"
            + scoring.format_table(["rank", "sample_id", "aggregate", "flagged", "causal_steps"], rows)
        )
    _write(out / "report.json", json.dumps({"populations": summary}, indent=2) + "\n", outputs)
    _write(out / "report.txt", "\n".join(text), outputs)
    if args.plot:
        from emfleet import plotting

        for cp in sorted({p.checkpoint for p in pops}):
            path = out / f"hist_cp{cp}.png"
            plotting.plot_class_histograms([p for p in pops if p.checkpoint == cp], path, args.bins)
            outputs.append(path)
    _write_manifest(out, "score", args, inputs, outputs, None, started)
    sys.stdout.write("\n".join(text))
    return EXIT_OK


def _safe_id(sample_id: str) -> str:
    return scoring.slug(sample_id)


def cmd_explain(args) -> int:
    started = time.perf_counter()
    pops = [p for p in scoring.load_scored_dir(*args.scored) if p.contains(args.sample_id)]
    if args.checkpoint is not None:
        pops = [p for p in pops if p.checkpoint == args.checkpoint]
    if not pops:
        where = "" if args.checkpoint is None else f" at checkpoint {args.checkpoint}"
        raise SampleLookupError(f"sample {args.sample_id!r} not found{where}")
    pop = max(pops, key=lambda p: p.checkpoint)
    report = scoring.explain(pop, args.sample_id)
    out = _prepare_out(args.out)
    outputs: list[Path] = []
    stem = f"explain_{_safe_id(args.sample_id)}_cp{pop.checkpoint}"
    _write(out / f"{stem}.json", json.dumps(report.to_dict(), indent=2) + "\n", outputs)
    _write(out / f"{stem}.txt", report.to_text(), outputs)
    if args.plot:
        from emfleet import plotting

        plotting.plot_step_profile(report, out / f"{stem}.png")
        outputs.append(out / f"{stem}.png")
    _write_manifest(out, "explain", args, [], outputs, None, started)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_consistency(args) -> int:
    started = time.perf_counter()
    pops = scoring.load_scored_dir(*args.scored)
    if args.checkpoints:
        pops = [p for p in pops if p.checkpoint in set(args.checkpoints)]
    report = scoring.checkpoint_consistency(pops, args.sample_id)
    out = _prepare_out(args.out)
    outputs: list[Path] = []
    stem = f"consistency_{_safe_id(args.sample_id)}"
    _write(out / f"{stem}.json", json.dumps(report.to_dict(), indent=2) + "\n", outputs)
    _write(out / f"{stem}.txt", report.to_text(), outputs)
    if args.plot:
        from emfleet import plotting

        plotting.plot_consistency(pops, args.sample_id, out / f"{stem}.png")
        outputs.append(out / f"{stem}.png")
    _write_manifest(out, "consistency", args, [], outputs, None, started)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_embed(args) -> int:
    started = time.perf_counter()
    dataset = load_dataset(args.dataset, args.format)
    inputs = [Path(args.dataset)]
    latent = None
    if args.truth:
        latent = synth.GroundTruth.load(args.truth).latent
        inputs.append(Path(args.truth))
    group_by = representation.GROUPINGS[args.group_by]
    if args.per_generation and "generation" not in group_by:
        group_by = group_by + ("generation",)
    try:
        fm = representation.build_feature_matrix(dataset, group_by, checkpoint=args.checkpoint, latent=latent)
    except KeyError as exc:
        raise ConfigError(f"truth file has no latent intensities for workload {exc.args[0]!r}") from None

    if args.per_generation:
        scopes = {}
        for gen in sorted(set(fm.generations)):
            scopes[gen] = fm.select([i for i, g in enumerate(fm.generations) if g == gen])
    else:
        scopes = {"pooled": fm}

    out = _prepare_out(args.out)
    outputs: list[Path] = []
    _write(out / "features.csv", fm.to_csv(), outputs)
    pcas, lines = {}, []
    for label, sub in scopes.items():
        suffix = "" if label == "pooled" else f"_{scoring.slug(label)}"
        pca = representation.pca_fit(sub, scale=args.scale)
        k = args.k
        if k < 1 or k > pca.n_components:
            raise ConstraintError(
                f"--k {args.k} exceeds the {pca.n_components} components available for {label}"
            )
        pcas[label] = pca
        _write(out / f"scree{suffix}.csv", representation.scree_csv(pca), outputs)
        _write(out / f"embedding{suffix}.csv", representation.embedding_csv(pca, sub, k), outputs)
        cum = representation.scree(pca)[k - 1][2]
        lines.append(f"{label}: rows={sub.shape[0]} cumulative variance at k={k}: {cum:.6f}")
        if sub.latent is not None:
            matches = representation.axis_correlation(representation.embed(pca, sub, k), sub.latent, synth.AXES)
            _write(out / f"axes{suffix}.csv", representation.axis_table(matches), outputs)
            for m in matches:
                r = "undefined" if m.assigned_abs_r is None else f"{m.assigned_abs_r:.4f}"
                lines.append(f"  {m.axis:<10} -> PC{m.assigned_pc}  |r| = {r}")
        if args.plot:
            from emfleet import plotting

            coords = representation.embed(pca, sub, k)
            plotting.plot_embedding(coords, sub.labels(), sub.workload_classes or sub.labels(), out / f"embedding{suffix}.png")
            outputs.append(out / f"embedding{suffix}.png")
    if args.plot:
        from emfleet import plotting

        plotting.plot_scree(pcas, out / "scree.png")
        outputs.append(out / "scree.png")
    _write_manifest(out, "embed", args, inputs, outputs, None, started)
    print("\n".join(lines))
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_threshold_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--contamination", type=float, default=0.005,
                   help="fraction of each population to flag (default 0.005)")
    g.add_argument("--absolute", type=float, default=None, help="flag aggregate scores >= this value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emfleet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"emfleet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic fleet with ground truth")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="fleet config JSON file")
    src.add_argument("--preset", choices=sorted(synth.PRESETS), default="table1")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=FORMATS, default="jsonl")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--inject", type=float, default=None, metavar="FRACTION",
                   help="inject extrinsic samples into this fraction of SSDs")
    p.add_argument("--boost", type=float, default=8.0)
    p.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"), default=None)
    p.add_argument("--inject-mode", choices=("persistent", "transient"), default="persistent")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a frozen model on (a subset of) a dataset")
    p.add_argument("dataset")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--class", dest="workload_class", default=None)
    p.add_argument("--checkpoint", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score every (workload class, checkpoint) population")
    p.add_argument("dataset")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--out", required=True)
    _add_threshold_flags(p)
    p.add_argument("--percentiles", type=_percentiles, default=scoring.DEFAULT_PERCENTILES)
    p.add_argument("--pooled-percentiles", action="store_true",
                   help="percentile tables over all classes at a checkpoint")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--k", type=int, default=10, help="top-k samples per population in the report")
    p.add_argument("--model", default=None, help="score against a frozen model instead of refitting")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("explain", help="per-step breakdown of one sample's score")
    p.add_argument("scored", nargs="+", help="scored output directories or files")
    p.add_argument("--sample", dest="sample_id", required=True)
    p.add_argument("--checkpoint", type=int, default=None, help="default: latest containing the sample")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("consistency", help="track one sample's flag across checkpoints")
    p.add_argument("scored", nargs="+")
    p.add_argument("--sample", dest="sample_id", required=True)
    p.add_argument("--checkpoints", type=int, nargs="+", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("embed", help="per-step medians -> PCA -> embedding")
    p.add_argument("dataset")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--group-by", choices=sorted(representation.GROUPINGS), default="workload-generation")
    scope = p.add_mutually_exclusive_group()
    scope.add_argument("--per-generation", dest="per_generation", action="store_true", default=True,
                       help="fit one PCA per SSD generation (default)")
    scope.add_argument("--pooled", dest="per_generation", action="store_false",
                       help="fit one PCA over all generations")
    p.add_argument("--scale", dest="scale", action="store_true", default=True)
    p.add_argument("--no-scale", dest="scale", action="store_false")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--checkpoint", type=int, default=None, help="default: latest")
    p.add_argument("--truth", default=None, help="ground-truth JSON for the axis-correlation table")
    p.add_argument("--seed", type=int, default=None, help="accepted for symmetry; embedding is deterministic")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EmfleetError as exc:
        print(f"emfleet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"emfleet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_LOOKUP


if __name__ == "__main__":
    sys.exit(main())
