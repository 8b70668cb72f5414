"""Batch command line: ``buildfunc {ingest,label,eval,synth,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 pipeline
error. Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import DEFAULTS, RunConfig, parse_override
from .errors import BuildFuncError, ConfigError, PipelineError
from .evaluation import compare_reports, evaluate_labeling, probability_surfaces, write_raster
from .ingest import Scene, load_scene, read_scene_json, write_scene_files
from .labeling import read_labels, run_pipeline, write_labels
from .synth import HighLevelSpec, SynthConfig, generate_scene, random_labels, write_synth
from .taxonomy import TaxonomyMap

log = logging.getLogger("buildfunc")

EXIT_CODES = {"config": 2, "data": 3, "pipeline": 4}


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def _taxonomy(cfg: RunConfig) -> TaxonomyMap:
    p = cfg.path("taxonomy")
    return TaxonomyMap.default() if p is None else TaxonomyMap.load(p)


def _scene(cfg: RunConfig, out: Path) -> Scene:
    """Scene from paths.scene, a previous ingest in the output dir, or raw files."""
    explicit = cfg.path("scene")
    if explicit is not None:
        cfg.require("scene")
        return read_scene_json(explicit)
    if cfg.path("footprints") is None and (out / "scene" / "scene.json").exists():
        return read_scene_json(out / "scene" / "scene.json")
    cfg.require("footprints", "pois")
    return load_scene(cfg.path("footprints"), cfg.path("pois"), _taxonomy(cfg),
                      cfg.ingest_config())


def cmd_ingest(cfg: RunConfig, args) -> dict:
    cfg.require("footprints", "pois")
    scene = load_scene(cfg.path("footprints"), cfg.path("pois"), _taxonomy(cfg),
                       cfg.ingest_config())
    out = Path(args.out)
    write_scene_files(scene, out / "scene")
    report = {"report": scene.report.to_dict(), "scene_digest": scene.digest(),
              "buildings": len(scene.buildings), "pois": len(scene.pois),
              "blocks": len(scene.blocks), "provenance": scene.provenance}
    _write_json(report, out / "ingest_report.json")
    return report


def cmd_label(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    scene = _scene(cfg, out)
    run = run_pipeline(scene, cfg.stage1, cfg.stage2, cfg.stage3, threads=args.threads)
    write_labels(scene, run.labels, out / "labels.geojson")
    if args.keep_stages:
        write_labels(scene, run.stage1, out / "labels_stage1.geojson")
        write_labels(scene, run.stage2, out / "labels_stage2.geojson")
    manifest = run.manifest()
    manifest["config"] = cfg.snapshot()
    manifest["provenance"] = scene.provenance
    _write_json(manifest, out / "manifest.json")
    return {"labels_digest": run.digest, "iterations_used": run.iterations_used,
            **run.per_stage_change_counts}


def cmd_eval(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    scene = _scene(cfg, out)
    surfaces = probability_surfaces(scene, cfg.kde, args.threads)
    if args.export_rasters:
        for r in surfaces:
            write_raster(r, out / "rasters" / f"probability_{int(r.function_class)}.txt")
    labels_path = Path(args.labels) if args.labels else out / "labels.geojson"
    named = {"labels": labels_path}
    if args.baseline:
        named["baseline"] = Path(args.baseline)
    reports = {}
    for name, path in named.items():
        labeling = read_labels(path, scene)
        rep = evaluate_labeling(scene, labeling, cfg.kde, cfg.w, args.threads, surfaces)
        reports[name] = rep
        _write_json(rep.to_dict(per_building=args.per_building), out / f"eval_{name}.json")
    summary = {name: r.summary() for name, r in reports.items()}
    if len(reports) > 1:
        comparison = compare_reports(reports)
        _write_json(comparison, out / "eval_comparison.json")
        summary["comparison"] = comparison
    return {name: {k: v for k, v in s.items() if k in ("bfmi", "mean_top1", "mean_cosine")}
            for name, s in summary.items() if name != "comparison"}


def synth_config(cfg: RunConfig, seed) -> SynthConfig:
    s = dict(cfg.raw["synth"])
    if seed is not None:
        s["seed"] = seed
    try:
        high = tuple(HighLevelSpec(int(h["zone"]), h["class"], float(h["radius"]),
                                   tuple(h.get("offset", (0.0, 0.0))))
                     for h in s.pop("high_level"))
        return SynthConfig.grid(int(s.pop("nx")), int(s.pop("ny")), float(s.pop("zone_size")),
                                float(s.pop("gap")), int(s.pop("seed")), s.pop("classes"),
                                high_level=high, **s)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth section: {exc}") from None


def cmd_synth(cfg: RunConfig, args) -> dict:
    scfg = synth_config(cfg, args.seed)
    scene, truth = generate_scene(scfg)
    out = Path(args.out)
    paths = write_synth(scene, truth, out)
    rnd = random_labels(scene, scfg.seed + 1)
    with open(out / "random_labels.csv", "w", encoding="utf-8") as fh:
        fh.write("id,label\n")
        for bid, fc in rnd.items():
            fh.write(f"{bid},{int(fc)}\n")
    return {"buildings": len(scene.buildings), "pois": len(scene.pois),
            "scene_digest": scene.digest(), "files": sorted(Path(p).name for p in paths.values())}


def cmd_report(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    lines = [f"run directory: {out}"]
    result = {}
    for name in ("ingest_report.json", "manifest.json", "eval_labels.json",
                 "eval_baseline.json", "eval_comparison.json"):
        p = out / name
        if not p.exists():
            continue
        doc = json.loads(p.read_text(encoding="utf-8"))
        result[name] = doc
        lines.append(f"== {name}")
        if name == "ingest_report.json":
            for k, v in doc["report"].items():
                if k != "errors":
                    lines.append(f"  {k}: {v}")
        elif name == "manifest.json":
            for k in ("labels_digest", "iterations_used", "stage2_change_counts",
                      "oscillation_detected", "per_stage_change_counts", "label_counts"):
                lines.append(f"  {k}: {doc[k]}")
        elif name == "eval_comparison.json":
            for lab, row in doc.items():
                lines.append(f"  {lab}: " + ", ".join(f"{k}={v}" for k, v in row.items()))
        else:
            for k in ("bfmi", "mean_top1", "mean_cosine", "w", "evaluated_count",
                      "excluded_count"):
                lines.append(f"  {k}: {doc[k]}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return {"files": sorted(result)}


COMMANDS = {"ingest": cmd_ingest, "label": cmd_label, "eval": cmd_eval,
            "synth": cmd_synth, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--threads", type=int, help="worker threads, 0 = auto")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="buildfunc", allow_abbrev=False, description="Label building functions from POIs and evaluate BFMI.",
        epilog="Any config value can be overridden as --section.key VALUE, e.g. --stage2.k 9 or --w 1")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], allow_abbrev=False, help="validate and clean input files")
    p = sub.add_parser("label", parents=[common], allow_abbrev=False, help="run the three labeling stages")
    p.add_argument("--keep-stages", action="store_true", help="also write stage 1/2 labels")
    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="compute BFMI for label files")
    p.add_argument("--labels", help="label file (default: <out>/labels.geojson)")
    p.add_argument("--baseline", help="second label file to compare against")
    p.add_argument("--per-building", action="store_true", help="include per-building rows")
    p.add_argument("--export-rasters", action="store_true", help="write probability rasters")
    p = sub.add_parser("synth", parents=[common], allow_abbrev=False, help="generate a synthetic city")
    p.add_argument("--seed", type=int)
    sub.add_parser("report", parents=[common], allow_abbrev=False, help="summarize a run directory")
    return parser


def _split_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        key = tok[2:]
        if not tok.startswith("--") or key.split("=", 1)[0].split(".", 1)[0] not in DEFAULTS:
            raise ConfigError(f"unrecognized argument {tok}")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        out[key] = parse_override(value)
    return out


def _fail(exc: BaseException, category: str, kind: str) -> int:
    err = {"error": kind, "category": category, "message": str(exc)}
    if isinstance(exc, PipelineError):
        err["stage"] = exc.stage
    print(json.dumps(err), file=sys.stderr)
    return EXIT_CODES.get(category, 4)


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, _split_overrides(extra))
        if args.out is None:
            args.out = str(cfg.output_dir)
        if args.threads is not None:
            if args.threads < 0:
                raise ConfigError("--threads must be >= 0")
            cfg.raw["thread_count"] = args.threads
        args.threads = cfg.threads
        result = COMMANDS[args.command](cfg, args)
    except PipelineError as exc:
        return _fail(exc, exc.category, exc.kind)
    except BuildFuncError as exc:
        return _fail(exc, exc.category, type(exc).__name__)
    if args.command != "report":
        print(json.dumps(result, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
