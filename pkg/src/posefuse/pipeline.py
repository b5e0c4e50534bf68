"""End-to-end orchestration over a dataset directory.

Stages per auxiliary pose: selection, global registration, local
refinement, completion; then evaluation against ground truth when the
dataset carries it. Every intermediate artifact is written to the run
directory together with a CSV and a text report.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .complete import AuxiliaryInput, FusionState, IterateConfig, TrainConfig, iterate_auxiliary_poses
from .errors import PreconditionError
from .fusion import DEFAULT_CONSENSUS_RES, write_registration
from .geometry import PoseSet, sim3_apply_pose_set, write_pose_set
from .metrics import HOLDOUT_RATIO, holdout_split, psnr, registration_error, ssim
from .refine import RefineConfig
from .selection import DEFAULT_DELTA, DEFAULT_K, DEFAULT_PHI, write_selection
from .splatrender import render_rgb, write_splats
from .synth import load_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = ["case", "stage", "dθx", "dθy", "dθz", "dp", "psnr", "ssim", "lpips", "wall_seconds"]


@dataclass
class PipelineConfig:
    seed: int = 0
    m: int = 15
    n: int = 15
    k: int = DEFAULT_K
    phi: float = DEFAULT_PHI
    delta: float = DEFAULT_DELTA
    consensus_res: int = DEFAULT_CONSENSUS_RES
    max_pairs: int = None
    random_mixed: bool = False
    skip_refine: bool = False
    skip_complete: bool = False
    holdout_ratio: float = HOLDOUT_RATIO
    refine: RefineConfig = field(default_factory=RefineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = None
    case: str = None
    timings: bool = True

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown pipeline config keys: {sorted(unknown)}")
        if isinstance(d.get("refine"), dict):
            d["refine"] = RefineConfig.from_dict(d["refine"])
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)

    def iterate_config(self):
        return IterateConfig(
            m=self.m, n=self.n, k=self.k, phi=self.phi, delta=self.delta,
            consensus_res=self.consensus_res, max_pairs=self.max_pairs, refine=self.refine,
            train=self.train, random_mixed=self.random_mixed, skip_refine=self.skip_refine,
            skip_complete=self.skip_complete, seed=self.seed)


@dataclass
class ReportRow:
    case: str
    stage: str
    error: object = None
    psnr: float = None
    ssim: float = None
    seconds: float = None

    def cells(self, timings=True):
        def f(x):
            return "" if x is None else f"{x:.6f}"
        e = self.error.as_tuple() if self.error is not None else (None,) * 4
        return [self.case, self.stage, *map(f, e), f(self.psnr), f(self.ssim), "",
                f(self.seconds) if timings else ""]


@dataclass
class PipelineReport:
    rows: list
    errors: dict
    nvs: dict
    run_dir: Path
    state: object = None
    timings: bool = True

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.cells(self.timings))
        return buf.getvalue()

    def text(self):
        lines = [f"{'case':<24}{'stage':<12}{'dθx':>10}{'dθy':>10}{'dθz':>10}{'dp':>11}"
                 f"{'psnr':>9}{'ssim':>8}{'secs':>9}"]
        for r in self.rows:
            c = r.cells(self.timings)

            def g(x, wd, p):
                return f"{float(x):>{wd}.{p}f}" if x else " " * (wd - 1) + "-"
            lines.append(f"{c[0]:<24}{c[1]:<12}{g(c[2], 10, 4)}{g(c[3], 10, 4)}{g(c[4], 10, 4)}"
                         f"{g(c[5], 11, 6)}{g(c[6], 9, 3)}{g(c[7], 8, 4)}{g(c[9], 9, 1)}")
        return "\n".join(lines) + "\n"


def _gt_cameras(ds, ids):
    if not ds.gt_main_frame:
        return None
    return PoseSet("gt", tuple(ds.gt_main_frame[i] for i in ids))


def _nvs_scores(model, cams, images):
    ps, ss = [], []
    for cam in cams:
        img = render_rgb(model, cam)
        ps.append(psnr(img, images[cam.id]))
        ss.append(ssim(img, images[cam.id]))
    return float(np.mean(ps)), float(np.mean(ss))


def run_pipeline(dataset_dir, config=None, dataset=None):
    """Run every stage over all auxiliary poses of a dataset directory.

    ``dataset`` may pass an already loaded dataset to skip reading files.
    """
    cfg = config or PipelineConfig()
    ds = dataset if dataset is not None else load_dataset(dataset_dir)
    root = Path(dataset_dir) if dataset_dir is not None else Path(ds.root or ".")
    if ds.n_poses < 2:
        raise PreconditionError("dataset needs a main pose and at least one auxiliary pose")
    if not ds.gt_main_frame:
        raise PreconditionError("dataset has no mixed-pose predictions (gt/transforms.json missing)")
    run_dir = Path(cfg.out_dir) if cfg.out_dir else root / "run"
    run_dir.mkdir(parents=True, exist_ok=True)
    case = cfg.case or root.name
    icfg = cfg.iterate_config()
    predictor = ds.predictor()

    main = ds.poses[0]
    state = FusionState(ds.model, main.cameras, dict(main.images), dict(main.masks),
                        dict(main.descriptors))
    rows, errors, nvs = [], {}, {}
    for k in range(1, ds.n_poses):
        pd = ds.poses[k]
        label = f"pose{k}"
        train, test = holdout_split(pd.cameras.ids, cfg.holdout_ratio, [cfg.seed, k])
        gt = _gt_cameras(ds, pd.cameras.ids)
        errors[k] = {}
        before_model = state.model

        def record(stage, seconds, **payload):
            row = ReportRow(f"{case}/{label}", stage, seconds=seconds)
            if stage == "selection":
                write_selection(payload["selection"], run_dir / f"{label}_selection.json")
                write_pose_set(payload["mixed"], run_dir / f"{label}_mixed.json")
            elif stage in ("global", "refine"):
                T = payload["transform"]
                aligned = sim3_apply_pose_set(T, pd.cameras, f"{label}_{stage}")
                if stage == "global":
                    write_registration(payload["registration"], run_dir / f"{label}_registration.json")
                else:
                    for j, tr in enumerate(payload["traces"]):
                        tr.write_csv(run_dir / f"{label}_trace.csv", append=j > 0)
                (run_dir / f"{label}_{stage}_transform.json").write_text(
                    json.dumps(T.to_dict(), indent=1), encoding="utf-8")
                write_pose_set(aligned, run_dir / f"{label}_{stage}_cameras.json")
                if gt is not None:
                    row.error = registration_error(aligned, gt)
                    errors[k][stage] = row.error
            elif stage == "complete":
                write_splats(payload["model"], run_dir / f"model_after_{label}.json")
            rows.append(row)
            log.info("%s %s done in %.1fs", label, stage, seconds)

        aux = AuxiliaryInput(pd.cameras, pd.images, pd.masks, pd.descriptors, ds.oracle,
                             predictor.predict, tuple(train))
        state = iterate_auxiliary_poses(state, aux, icfg, pose_index=k, recorder=record)
        if not cfg.skip_complete and test:
            cams = sim3_apply_pose_set(state.transforms[-1], pd.cameras).subset(test)
            t0 = time.perf_counter()
            before = _nvs_scores(before_model, cams, pd.images)
            after = _nvs_scores(state.model, cams, pd.images)
            secs = time.perf_counter() - t0
            nvs[k] = {"before": before, "after": after}
            rows.append(ReportRow(f"{case}/{label}", "main-only", psnr=before[0], ssim=before[1]))
            rows.append(ReportRow(f"{case}/{label}", "completed", psnr=after[0], ssim=after[1],
                                  seconds=secs))
    report = PipelineReport(rows, errors, nvs, run_dir, state, cfg.timings)
    (run_dir / "report.csv").write_text(report.csv_text(), encoding="utf-8")
    (run_dir / "report.txt").write_text(report.text(), encoding="utf-8")
    (run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=1, default=str),
                                         encoding="utf-8")
    return report
