"""Command-line harness: preprocess, fuse, postprocess, evaluate, synth, pipeline.

Every stage reads its inputs from files and writes its outputs to
``--output-dir``, so any stage can be re-run on its own. Settings come from
a JSON config file; command-line flags take precedence over it.

Exit codes: 0 success, 2 bad configuration, 3 bad data.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import (
    AerotreeError,
    ConfigError,
    ParameterError,
    ShapeError,
    SpecError,
    UndefinedMetricError,
)
from .fusion import FusionParams, ensemble_max, threshold
from .metrics import CaseRow, MetricParams, MetricsReport, evaluate_case
from .postprocess import ReconnectParams, refine
from .preprocess import (
    PreprocessParams,
    clip_normalize,
    crop,
    lung_bbox,
    resample_isotropic,
)
from .synth import SynthTreeSpec, add_noise_blob, cut_branch, generate, lung_surrogate
from .volume import VoxelGrid, read_nifti, write_nifti

log = logging.getLogger("aerotree")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
MANIFEST_COLUMNS = ("case_id", "pred_path", "gt_path", "lung_path")

FUSED_PROB = "fused_prob.nii.gz"
FUSED_MASK = "fused_mask.nii.gz"
REFINED_MASK = "refined_mask.nii.gz"
REFINE_REPORT = "refine_report.json"
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"


class StageError(AerotreeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    ct: Optional[str] = None
    prob_maps: List[str] = field(default_factory=list)
    lung: Optional[str] = None
    gt: Optional[str] = None
    mask: Optional[str] = None
    manifest: Optional[str] = None
    output_dir: str = "aerotree_out"
    preprocess: PreprocessParams = PreprocessParams()
    fusion: FusionParams = FusionParams()
    reconnect: ReconnectParams = ReconnectParams()
    metrics: MetricParams = MetricParams()
    parallel_cases: int = 1

    def out(self, name: str) -> Path:
        return Path(self.output_dir) / name


_SECTIONS = {
    "preprocess": PreprocessParams,
    "fusion": FusionParams,
    "reconnect": ReconnectParams,
    "metrics": MetricParams,
}
_PATH_KEYS = ("ct", "lung", "gt", "mask", "manifest", "output_dir")


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (ParameterError, TypeError) as e:
        raise ConfigError(f"invalid {name!r} settings: {e}") from e


def load_config(path: Optional[str]) -> PipelineConfig:
    """Read a JSON config; relative paths resolve against its directory."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    base = p.parent
    cfg = PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kw[key] = _section(_SECTIONS[key], value, key)
        elif key in _PATH_KEYS:
            kw[key] = None if value is None else str(base / value)
        elif key == "prob_maps":
            if not isinstance(value, list):
                raise ConfigError("prob_maps must be a list of paths")
            kw[key] = [str(base / v) for v in value]
        elif key == "parallel_cases":
            kw[key] = value
    return replace(cfg, **kw)


def _threads(flag: Optional[int], cfg: PipelineConfig) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("AEROTREE_THREADS"):
        try:
            n = int(os.environ["AEROTREE_THREADS"])
        except ValueError as e:
            raise ConfigError("AEROTREE_THREADS must be an integer") from e
    else:
        n = cfg.parallel_cases
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"thread count must be a positive integer, got {n!r}")
    return n


def apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Fold command-line flags over the file config."""
    try:
        if getattr(args, "threshold", None) is not None:
            cfg = replace(cfg, fusion=replace(cfg.fusion, threshold=args.threshold))
        rc = {}
        if getattr(args, "search_radius_mm", None) is not None:
            rc["search_radius_mm"] = args.search_radius_mm
        if getattr(args, "max_angle_deg", None) is not None:
            rc["max_angle_deg"] = args.max_angle_deg
        if rc:
            cfg = replace(cfg, reconnect=replace(cfg.reconnect, **rc))
        if getattr(args, "branch_detect_fraction", None) is not None:
            cfg = replace(
                cfg, metrics=replace(cfg.metrics, branch_detect_fraction=args.branch_detect_fraction)
            )
    except ParameterError as e:
        raise ConfigError(str(e)) from e
    for key in ("ct", "lung", "gt", "mask", "manifest"):
        value = getattr(args, key, None)
        if value is not None:
            cfg = replace(cfg, **{key: value})
    if getattr(args, "prob", None):
        cfg = replace(cfg, prob_maps=list(args.prob))
    if getattr(args, "output_dir", None) is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    cfg = replace(cfg, parallel_cases=_threads(getattr(args, "threads", None), cfg))
    return cfg


def _require(cfg: PipelineConfig, *keys: str) -> None:
    for key in keys:
        value = getattr(cfg, key)
        if not value:
            raise ConfigError(f"missing required input {key!r}")
        for p in value if isinstance(value, list) else [value]:
            if not Path(p).is_file():
                raise ConfigError(f"{key} file not found: {p}")


def _outdir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def read_mask(path) -> VoxelGrid:
    """Read a label volume and binarise it (nonzero is foreground)."""
    grid = read_nifti(path)
    if grid.is_binary:
        return grid
    return grid.with_samples((grid.samples != 0).astype(np.uint8), unit="binary")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages


def cmd_preprocess(cfg: PipelineConfig) -> dict:
    """Resample CT, lung (and GT) to isotropic spacing, crop to the lungs, scale CT."""
    _require(cfg, "ct", "lung")
    if cfg.gt:
        _require(cfg, "gt")
    out = _outdir(cfg)
    params = cfg.preprocess
    ct = read_nifti(cfg.ct, unit="HU")
    lung = read_mask(cfg.lung)
    if not ct.same_geometry(lung):
        raise ShapeError("CT and lung mask differ in geometry")
    ct_iso = resample_isotropic(ct, params.target_spacing)
    lung_iso = resample_isotropic(lung, params.target_spacing, mode="nearest")
    box = lung_bbox(lung_iso, params.crop_margin)
    ct_out = clip_normalize(crop(ct_iso, box), params)
    write_nifti(ct_out, out / "ct_preprocessed.nii.gz")
    write_nifti(crop(lung_iso, box), out / "lung_preprocessed.nii.gz")
    written = ["ct_preprocessed.nii.gz", "lung_preprocessed.nii.gz"]
    if cfg.gt:
        gt = read_mask(cfg.gt)
        gt_iso = resample_isotropic(gt, params.target_spacing, mode="nearest")
        write_nifti(crop(gt_iso, box), out / "gt_preprocessed.nii.gz")
        written.append("gt_preprocessed.nii.gz")
    sidecar = {
        "source_dims": list(ct.dims),
        "source_spacing": [float(s) for s in ct.spacing],
        "source_affine": np.asarray(ct.affine).tolist(),
        "resampled_dims": list(ct_iso.dims),
        "target_spacing": params.target_spacing,
        "bbox_min": list(box.min),
        "bbox_max": list(box.max),
        "clip_range": [params.clip_low, params.clip_high],
        "outputs": written,
    }
    _write_json(out / "preprocess.json", sidecar)
    log.info("preprocessed %s -> %s, crop %s..%s", ct.dims, ct_out.dims, box.min, box.max)
    return sidecar


def cmd_fuse(cfg: PipelineConfig) -> dict:
    """Voxel-wise maximum of the probability maps, then threshold."""
    _require(cfg, "prob_maps")
    out = _outdir(cfg)
    maps = [read_nifti(p, unit="probability") for p in cfg.prob_maps]
    fused = ensemble_max(maps)
    mask = threshold(fused, cfg.fusion)
    write_nifti(fused, out / FUSED_PROB)
    write_nifti(mask, out / FUSED_MASK)
    n = int(np.count_nonzero(mask.samples))
    log.info("fused %d maps, %d foreground voxels at t=%.3g", len(maps), n, cfg.fusion.threshold)
    return {"maps": len(maps), "foreground_voxels": n}


def cmd_postprocess(cfg: PipelineConfig) -> dict:
    """Refine a binary mask: reconnect aligned fragments, discard the rest."""
    if not cfg.mask:
        cfg = replace(cfg, mask=str(cfg.out(FUSED_MASK)))
    _require(cfg, "mask")
    out = _outdir(cfg)
    mask = read_mask(cfg.mask)
    result = refine(mask, params=cfg.reconnect)
    write_nifti(result.mask, out / REFINED_MASK)
    report = result.report
    report["params"] = asdict(cfg.reconnect)
    _write_json(out / REFINE_REPORT, report)
    log.info(
        "refined: %d reconnected, %d discarded",
        len(result.reconnected),
        len(result.discarded),
    )
    return report


def read_manifest(path) -> List[dict]:
    """Rows of a case manifest; relative paths resolve against its directory."""
    p = Path(path)
    base = p.parent
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in MANIFEST_COLUMNS):
            raise ConfigError(f"manifest {path} must have columns {', '.join(MANIFEST_COLUMNS)}")
        rows = []
        for rec in reader:
            case = {"case_id": rec["case_id"].strip()}
            for key in MANIFEST_COLUMNS[1:]:
                case[key] = str(base / rec[key].strip())
            rows.append(case)
    ids = [r["case_id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise ConfigError("manifest case_id values must be unique")
    if not rows:
        raise ConfigError(f"manifest {path} lists no cases")
    return rows


def _evaluate_one(case: dict, params: MetricParams) -> CaseRow:
    try:
        pred = read_mask(case["pred_path"])
        gt = read_mask(case["gt_path"])
        lung = read_mask(case["lung_path"])
        return evaluate_case(pred, gt, lung, params, case_id=case["case_id"])
    except (AerotreeError, OSError) as e:
        return CaseRow(case["case_id"], flag=f"{type(e).__name__}: {e}")


def cmd_evaluate(cfg: PipelineConfig) -> MetricsReport:
    """Metrics for every manifest case; writes metrics.json and metrics.csv."""
    _require(cfg, "manifest")
    out = _outdir(cfg)
    cases = read_manifest(cfg.manifest)
    if cfg.parallel_cases > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.parallel_cases, len(cases))) as ex:
            rows = list(ex.map(_evaluate_one, cases, [cfg.metrics] * len(cases)))
    else:
        rows = [_evaluate_one(c, cfg.metrics) for c in cases]
    for r in rows:
        if r.flagged:
            log.warning("case %s flagged: %s", r.case_id, r.flag)
    report = MetricsReport(rows)
    (out / METRICS_JSON).write_text(report.to_json() + "\n")
    (out / METRICS_CSV).write_text(report.to_csv())
    if report.summary is None:
        raise UndefinedMetricError("no case could be evaluated")
    return report


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> dict:
    """Write a synthetic tree, its truth JSON, a lung surrogate and optional variants."""
    out = _outdir(cfg)
    try:
        spec = SynthTreeSpec(
            seed=args.seed,
            depth=args.depth,
            root_length_mm=args.root_length_mm,
            root_radius_mm=args.root_radius_mm,
            length_decay=args.length_decay,
            radius_decay=args.radius_decay,
            branch_angle_deg=args.branch_angle_deg,
            spacing=tuple(args.spacing),
            dims=tuple(args.dims),
        )
        truth = generate(spec)
    except (ParameterError, SpecError, TypeError) as e:
        raise ConfigError(str(e)) from e
    write_nifti(truth.mask, out / "tree_mask.nii.gz")
    truth.save_json(out / "truth.json")
    write_nifti(lung_surrogate(truth, args.stub_mm), out / "lung_mask.nii.gz")
    written = ["tree_mask.nii.gz", "truth.json", "lung_mask.nii.gz"]
    mask = truth.mask
    if args.cut is not None:
        mask = cut_branch(truth, args.cut, args.gap_mm, mask).mask
    for blob in args.noise or []:
        mask, _ = add_noise_blob(mask, blob[:3], blob[3])
    if args.cut is not None or args.noise:
        write_nifti(mask, out / "fixture_mask.nii.gz")
        written.append("fixture_mask.nii.gz")
    log.info("synthetic tree: %d branches, %.1f mm", truth.branch_count, truth.total_length_mm)
    return {"branch_count": truth.branch_count, "files": written}


def cmd_pipeline(cfg: PipelineConfig) -> dict:
    """preprocess (when a CT is given) -> fuse -> postprocess -> evaluate (when GT is given)."""
    _require(cfg, "prob_maps")
    if cfg.ct:
        _require(cfg, "ct", "lung")
    if cfg.gt:
        _require(cfg, "gt", "lung")
    out = _outdir(cfg)
    summary = {}
    gt, lung = cfg.gt, cfg.lung

    def stage(name, fn, *a):
        t0 = time.perf_counter()
        try:
            result = fn(*a)
        except ConfigError:
            raise
        except (AerotreeError, OSError) as e:
            raise StageError(name, e) from e
        summary[name] = round(time.perf_counter() - t0, 3)
        return result

    if cfg.ct:
        stage("preprocess", cmd_preprocess, cfg)
        lung = str(cfg.out("lung_preprocessed.nii.gz"))
        if cfg.gt:
            gt = str(cfg.out("gt_preprocessed.nii.gz"))
    stage("fuse", cmd_fuse, cfg)
    stage("postprocess", cmd_postprocess, replace(cfg, mask=str(cfg.out(FUSED_MASK))))
    report = None
    if gt:
        manifest = out / "manifest.csv"
        with open(manifest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            w.writerow(["case", REFINED_MASK, os.path.relpath(gt, out), os.path.relpath(lung, out)])
        report = stage("evaluate", cmd_evaluate, replace(cfg, manifest=str(manifest)))
    return {"seconds": summary, "report": report}


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--output-dir", help="directory for all outputs")
    p.add_argument("--threads", type=int, help="parallel cases (default: $AEROTREE_THREADS or 1)")
    p.add_argument("--threshold", type=float, help="probability threshold for the fused mask")
    p.add_argument("--search-radius-mm", type=float, help="gap search radius for reconnection")
    p.add_argument("--max-angle-deg", type=float, help="largest accepted endpoint angle")
    p.add_argument("--branch-detect-fraction", type=float,
                   help="centerline fraction a predicted branch must cover")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aerotree", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample, crop and scale a CT")
    _add_common(p)
    p.add_argument("--ct")
    p.add_argument("--lung")
    p.add_argument("--gt")

    p = sub.add_parser("fuse", help="ensemble probability maps and threshold")
    _add_common(p)
    p.add_argument("--prob", nargs="+", help="probability map files")

    p = sub.add_parser("postprocess", help="refine a binary airway mask")
    _add_common(p)
    p.add_argument("--mask", help="binary mask (default: <output-dir>/fused_mask.nii.gz)")

    p = sub.add_parser("evaluate", help="metrics over a manifest of cases")
    _add_common(p)
    p.add_argument("--manifest", help="CSV with case_id,pred_path,gt_path,lung_path")

    p = sub.add_parser("synth", help="write a synthetic airway tree fixture")
    _add_common(p)
    d = SynthTreeSpec()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--depth", type=int, default=d.depth)
    p.add_argument("--dims", type=int, nargs=3, default=list(d.dims))
    p.add_argument("--spacing", type=float, nargs=3, default=list(d.spacing))
    p.add_argument("--root-length-mm", type=float, default=d.root_length_mm)
    p.add_argument("--root-radius-mm", type=float, default=d.root_radius_mm)
    p.add_argument("--length-decay", type=float, default=d.length_decay)
    p.add_argument("--radius-decay", type=float, default=d.radius_decay)
    p.add_argument("--branch-angle-deg", type=float, default=d.branch_angle_deg)
    p.add_argument("--cut", type=int, metavar="BRANCH", help="sever this branch id")
    p.add_argument("--gap-mm", type=float, default=4.0, help="width of the cut")
    p.add_argument("--noise", type=float, nargs=4, action="append",
                   metavar=("X", "Y", "Z", "R"), help="add a ball at (x,y,z) mm of radius R")
    p.add_argument("--stub-mm", type=float, help="trachea length left above the lung surrogate")

    p = sub.add_parser("pipeline", help="preprocess, fuse, postprocess and evaluate")
    _add_common(p)
    p.add_argument("--ct")
    p.add_argument("--prob", nargs="+")
    p.add_argument("--lung")
    p.add_argument("--gt")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "preprocess":
            cmd_preprocess(cfg)
        elif args.command == "fuse":
            cmd_fuse(cfg)
        elif args.command == "postprocess":
            cmd_postprocess(cfg)
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg).table())
        elif args.command == "synth":
            print(json.dumps(cmd_synth(args, cfg)))
        elif args.command == "pipeline":
            result = cmd_pipeline(cfg)
            for name, sec in result["seconds"].items():
                print(f"{name:<12} {sec:8.2f} s")
            if result["report"] is not None:
                print(result["report"].table())
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (AerotreeError, OSError) as e:
        log.error("%s", e)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
