"""``posefuse`` command line.

Exit codes: 0 success, 2 precondition failure (bad input), 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import tomli

from .errors import PreconditionError, StageError

EXIT_OK = 0
EXIT_PRECONDITION = 2
EXIT_STAGE = 3

log = logging.getLogger("posefuse")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise PreconditionError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise PreconditionError(f"invalid TOML in {path}: {exc}") from exc


def _masks_from_dir(d, ids):
    from .splatrender import read_pgm
    return {i: read_pgm(Path(d) / f"{i}.pgm") for i in ids}


def _images_from_dir(d, ids):
    from .splatrender import read_ppm
    return {i: read_ppm(Path(d) / f"{i}.ppm") for i in ids}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1), encoding="utf-8")


# -- subcommands ------------------------------------------------------------

def cmd_gen(args, conf):
    from .synth import SynthConfig, make_dataset
    opts = dict(conf.get("synth", {}))
    opts["seed"] = args.seed if args.seed is not None else opts.get("seed", 0)
    for key in ("n_poses", "views_per_pose", "resolution", "n_splats"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    if args.underside_patch:
        opts["underside_patch"] = True
    cfg = SynthConfig.from_dict(opts)
    if args.noiseless:
        cfg = cfg.noiseless()
    make_dataset(cfg, args.out)
    print(f"wrote {cfg.n_poses}-pose dataset with {cfg.views_per_pose} views per pose to {args.out}")


def cmd_select(args, conf):
    from .geometry import read_pose_set
    from .selection import DescriptorSet, select_mixed_set, write_selection
    from .synth import read_descriptors, read_oracle
    opts = conf.get("select", {})
    main_poses = read_pose_set(args.main_cams)
    aux_poses = read_pose_set(args.aux_cams)
    sel = select_mixed_set(
        DescriptorSet.from_mapping(read_descriptors(args.main_desc), main_poses.ids),
        DescriptorSet.from_mapping(read_descriptors(args.aux_desc), aux_poses.ids),
        main_poses, aux_poses, read_oracle(args.oracle),
        args.m or opts.get("m", 15), args.n or opts.get("n", 15), args.k or opts.get("k", 50),
        args.phi or opts.get("phi", 60.0), args.delta or opts.get("delta", 45.0))
    write_selection(sel, args.out)
    print(f"selected {len(sel.main_ids)}+{len(sel.aux_ids)} views, score {sel.score:.6f}")


def cmd_register(args, conf):
    from .fusion import global_register, write_registration
    from .geometry import read_pose_set
    from .splatrender import read_splats
    opts = conf.get("register", {})
    P_main, P_aux, P_mix = (read_pose_set(p) for p in (args.main, args.aux, args.mixed))
    reg = global_register(P_main, P_aux, P_mix, read_splats(args.model),
                          _masks_from_dir(args.masks, P_aux.ids),
                          args.consensus_res or opts.get("consensus_res", 128),
                          max_pairs=args.max_pairs or opts.get("max_pairs"))
    write_registration(reg, args.out)
    print(f"stage 1 IoU {reg.stage1.score:.6f}, stage 2 IoU {reg.stage2.score:.6f}")


def cmd_refine(args, conf):
    from .fusion import read_registration
    from .geometry import Sim3, sim3_apply_pose_set, sim3_compose, write_pose_set
    from .refine import RefineConfig, local_refine
    from .splatrender import read_splats
    cfg = RefineConfig.from_dict(conf.get("refine", {}))
    reg = read_registration(args.registration)
    P = reg.aligned_aux
    T, traces = local_refine(P, read_splats(args.model), _images_from_dir(args.images, P.ids),
                             _masks_from_dir(args.masks, P.ids), Sim3.identity(), cfg)
    total = sim3_compose(T, reg.stage2.transform)
    aligned = sim3_apply_pose_set(T, P, "refined")
    out = Path(args.out)
    write_pose_set(aligned, out)
    _write_json(out.with_name(out.stem + "_transform.json"), total.to_dict())
    if args.trace:
        for j, tr in enumerate(traces):
            tr.write_csv(args.trace, append=j > 0)
    print("refined: " + ", ".join(f"{t.stage} {t.initial_loss:.6g} -> {t.final_loss:.6g}" for t in traces))


def cmd_complete(args, conf):
    from .complete import TrainConfig, balanced_schedule, finetune_splats
    from .geometry import read_pose_set
    from .splatrender import read_splats, write_splats
    from .synth import load_dataset
    opts = dict(conf.get("train", {}))
    if args.iters:
        opts["iterations"] = args.iters
    if args.seed is not None:
        opts["seed"] = args.seed
    cfg = TrainConfig.from_dict(opts)
    ds = load_dataset(args.views)
    registered = read_pose_set(args.registration)
    main = ds.poses[0]
    views = {i: (main.cameras[i], main.images[i], main.masks[i]) for i in main.cameras.ids}
    aux_ids = []
    for pd in ds.poses[1:]:
        for i in pd.cameras.ids:
            if i in registered:
                views[i] = (registered[i], pd.images[i], pd.masks[i])
                aux_ids.append(i)
    if not aux_ids:
        raise PreconditionError("registration file shares no camera ids with the dataset's auxiliary poses")
    sched = balanced_schedule(main.cameras.ids, aux_ids, cfg.iterations, cfg.seed)
    model = finetune_splats(read_splats(args.model), views, sched, cfg)
    write_splats(model, args.out)
    print(f"fine-tuned {len(model)} splats for {cfg.iterations} iterations")


def cmd_eval(args, conf):
    from .geometry import read_pose_set
    from .metrics import psnr, registration_error, ssim
    from .splatrender import render_rgb, read_splats
    est, gt = read_pose_set(args.est), read_pose_set(args.gt)
    err = registration_error(est, gt)
    out = {"dtheta_x": err.dtheta_x, "dtheta_y": err.dtheta_y, "dtheta_z": err.dtheta_z, "dp": err.dp}
    if args.model and args.images:
        model = read_splats(args.model)
        imgs = _images_from_dir(args.images, est.ids)
        rendered = {i: render_rgb(model, est[i]) for i in est.ids}
        out["psnr"] = sum(psnr(rendered[i], imgs[i]) for i in est.ids) / len(est)
        out["ssim"] = sum(ssim(rendered[i], imgs[i]) for i in est.ids) / len(est)
    print(json.dumps(out, indent=1))


def cmd_pipeline(args, conf):
    from .pipeline import PipelineConfig, run_pipeline
    opts = dict(conf.get("pipeline", {}))
    for table in ("refine", "train"):
        if table in conf:
            opts[table] = conf[table]
    if args.seed is not None:
        opts["seed"] = args.seed
    for flag in ("random_mixed", "skip_refine", "skip_complete"):
        if getattr(args, flag):
            opts[flag] = True
    if args.mixed_size:
        opts["m"] = opts["n"] = args.mixed_size
    if args.out:
        opts["out_dir"] = args.out
    if args.consensus_res:
        opts["consensus_res"] = args.consensus_res
    report = run_pipeline(args.dataset, PipelineConfig.from_dict(opts))
    sys.stdout.write(report.text())
    print(f"artifacts in {report.run_dir}")


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="posefuse", description="Multi-pose splat registration and fusion.")
    p.add_argument("--seed", type=int, default=None, help="global random seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the render kernels")
    p.add_argument("--config", default=None, help="TOML file with [synth], [select], [pipeline], [refine], [train] tables")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic multi-pose dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-poses", dest="n_poses", type=int)
    g.add_argument("--views", dest="views_per_pose", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--splats", dest="n_splats", type=int)
    g.add_argument("--noiseless", action="store_true")
    g.add_argument("--underside-patch", action="store_true")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("select", help="choose the mixed-pose image set")
    s.add_argument("--main-desc", required=True)
    s.add_argument("--aux-desc", required=True)
    s.add_argument("--main-cams", required=True)
    s.add_argument("--aux-cams", required=True)
    s.add_argument("--oracle", required=True)
    s.add_argument("--m", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--phi", type=float)
    s.add_argument("--delta", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    r = sub.add_parser("register", help="two-stage global registration")
    r.add_argument("--main", required=True)
    r.add_argument("--aux", required=True)
    r.add_argument("--mixed", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--masks", required=True)
    r.add_argument("--consensus-res", type=int)
    r.add_argument("--max-pairs", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    f = sub.add_parser("refine", help="local silhouette + photometric refinement")
    f.add_argument("--registration", required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--images", required=True)
    f.add_argument("--masks", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--trace")
    f.set_defaults(func=cmd_refine)

    c = sub.add_parser("complete", help="fine-tune the model on registered views")
    c.add_argument("--model", required=True)
    c.add_argument("--views", required=True, help="dataset directory")
    c.add_argument("--registration", required=True, help="registered auxiliary cameras (pose-set JSON)")
    c.add_argument("--iters", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="registration error and optional PSNR/SSIM")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--model")
    e.add_argument("--images")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="run every stage over a dataset")
    pl.add_argument("--dataset", required=True)
    pl.add_argument("--out")
    pl.add_argument("--random-mixed", action="store_true")
    pl.add_argument("--skip-refine", action="store_true")
    pl.add_argument("--skip-complete", action="store_true")
    pl.add_argument("--mixed-size", type=int)
    pl.add_argument("--consensus-res", type=int)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            import numba
            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        conf = _load_config(args.config)
        args.func(args, conf)
    except StageError as exc:
        print(f"posefuse: stage failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            diag = {k: v for k, v in exc.diagnostics.items() if isinstance(v, (int, float, str))}
            if diag:
                print(f"posefuse: diagnostics: {json.dumps(diag)}", file=sys.stderr)
        return EXIT_STAGE
    except (PreconditionError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"posefuse: error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
