"""Command-line entry point: ``tetsim <command> [--config FILE] [flags]``.

Options resolve in three layers: built-in defaults, then the JSON object in
``--config`` (unknown keys are rejected), then flags given on the command
line. Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 I/O error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import InvalidInputError, NumericalError, SolverDivergenceError

log = logging.getLogger("tetsim")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


# Destinations are not echoed so identical inputs give identical files.
_OUTPUT_KEYS = {"out", "dense_out", "gaussians_out", "state_out", "loss_csv"}


def _metadata(command, opts):
    return {"tool": "tetsim", "version": __version__, "command": command,
            "config": {k: opts[k] for k in sorted(opts) if k not in _OUTPUT_KEYS}, "seed": opts.get("seed"),
            "units": io.UNITS}


def _require(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise InvalidInputError(f"missing required option --{k.replace('_', '-')}")


def _sim_config(opts, frame_dt=None):
    from .xpbd import SimConfig

    return SimConfig(
        frame_dt=float(frame_dt if frame_dt is not None else opts["frame_dt"]),
        substeps=int(opts["substeps"]),
        solver_iterations=int(opts["iterations"]),
        gravity=tuple(float(g) for g in opts["gravity"]),
        airmesh_threshold=float(opts["airmesh_threshold"]),
        mode=opts["solver_mode"],
    )


def _labels_partition(labels, n):
    from .xpbd import Partition

    if labels is None:
        log.warning("no labels given; every point is treated as flex")
        return Partition.from_rigid([], n)
    return Partition.from_labels(labels)


def _build_scene(opts, frame_dt=None):
    """(rest positions, constraints, partition, masses, config, groups, extra)."""
    from . import scenes
    from .xpbd import Constraints

    config = _sim_config(opts, frame_dt)
    demo = opts.get("demo")
    if demo:
        if demo == "hanging-grid":
            sc = scenes.hanging_grid(mass=float(opts["mass"]), compliance=float(opts["compliance"]), config=config)
        elif demo == "two-material":
            sc = scenes.two_material_cloth(mass=float(opts["mass"]), config=config)
        else:
            raise InvalidInputError(f"unknown demo scene {demo!r}")
        return sc.rest_positions, sc.constraints, sc.partition, sc.masses, config, sc.edge_material, {}
    _require(opts, "cloud", "tetmesh")
    dense, labels, cloud = _read_cloud(opts["cloud"])
    mesh, sample = io.read_tetmesh(opts["tetmesh"])
    if sample is None:
        sample = np.arange(len(dense))
    pos = dense[sample]
    sub_labels = None if labels is None else labels[sample]
    if mesh.n_tets and mesh.tets.max() >= len(pos):
        raise InvalidInputError("tetmesh references more points than the sampled subset holds")
    cons = Constraints.from_mesh(pos, mesh, float(opts["compliance"]), airmesh=bool(opts["airmesh"]))
    part = _labels_partition(sub_labels, len(pos))
    masses = np.full(len(pos), float(opts["mass"]))
    extra = {"dense": dense, "cloud": cloud, "sample": sample, "mesh": mesh}
    return pos, cons, part, masses, config, None, extra


def _read_cloud(path):
    """Positions, labels and the GaussianCloud (or None) of a cloud file."""
    header, _, _ = io._split_header(path)
    if "qw" in header.get("fields", []):
        cloud = io.read_gaussians(path)
        return cloud.positions, cloud.labels, cloud
    pos, labels = io.read_points(path)
    return pos, labels, None


def _apply_params(opts, cons, masses, partition):
    if not opts.get("params"):
        return cons, masses
    from .sysid import PhysParams

    p = PhysParams.from_dict(io.load_json(opts["params"]))
    return cons.with_compliance(p.compliances(cons.n_distance)), p.masses(len(masses))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_tetra(opts):
    from .geom import TetMeshBuilder

    _require(opts, "cloud", "out")
    pos, _, _ = _read_cloud(opts["cloud"])
    b = TetMeshBuilder(target_count=int(opts["target_count"]), k=int(opts["k"]), seed=int(opts["seed"])).fit(pos)
    io.write_tetmesh(opts["out"], b.mesh_, b.sample_indices_, _metadata("tetra", opts))
    print(f"points {len(b.sample_indices_)}  delaunay tets {b.raw_mesh_.n_tets}  "
          f"kept tets {b.mesh_.n_tets}  edges {b.mesh_.n_edges}")
    return EXIT_OK


def _driver_targets(opts, pos, partition):
    """List of rigid-target arrays, one per simulated frame (frames 1..F)."""
    from . import scenes
    from .posefit import bind_points
    from .skinning import lbs

    rigid = partition.rigid_indices
    if opts.get("driver"):
        traj, _, _ = io.read_trajectory(opts["driver"])
        if traj.shape[1] not in (len(rigid), len(pos)):
            raise InvalidInputError(f"driver has {traj.shape[1]} points; expected {len(rigid)} or {len(pos)}")
        return [f if len(f) == len(rigid) else f[rigid] for f in traj[1:]]
    if opts.get("rig") or opts.get("poses"):
        _require(opts, "rig", "poses")
        rig = io.read_rig(opts["rig"])
        poses, shape = io.read_poses(opts["poses"])
        if not poses:
            return []
        bound = bind_points(rig, poses[0], pos[rigid], shape)
        return [lbs(rig, p, bound.canonical, bound.weights) for p in poses[1:]]
    frames = int(opts["frames"])
    if float(opts["swing_amplitude"]) == 0.0:
        return [pos[rigid].copy() for _ in range(frames)]
    return list(scenes.swing_driver(pos[rigid], frames, float(opts["frame_dt"]),
                                    amplitude=float(opts["swing_amplitude"]), period=float(opts["swing_period"])))


def cmd_simulate(opts):
    from .transfer import DeformationTransfer
    from .xpbd import SimState, step

    _require(opts, "out")
    pos, cons, part, masses, config, _, extra = _build_scene(opts)
    cons, masses = _apply_params(opts, cons, masses, part)
    state = SimState.at_rest(pos, 1.0 / masses)
    start_frame = 0
    if opts.get("resume"):
        state, start_frame = io.read_state(opts["resume"])
        if len(state) != len(pos):
            raise InvalidInputError(f"resume state has {len(state)} points, scene has {len(pos)}")
    targets = _driver_targets(opts, state.positions, part)

    transfer = None
    if opts.get("dense_out") and extra.get("dense") is not None:
        cloud = extra.get("cloud")
        transfer = DeformationTransfer().fit(extra["dense"], sampled_indices=extra["sample"], mesh=extra["mesh"],
                                             rotations=None if cloud is None else cloud.rotations)

    meta = _metadata("simulate", opts)
    frames = [state.positions] if targets else []
    dense_frames = [transfer.transform(state.positions)] if (transfer and targets) else []
    status = EXIT_OK
    for f, tgt in enumerate(targets):
        try:
            state = step(state, cons, part, tgt, config)
        except SolverDivergenceError as exc:
            log.error("solver diverged at frame %d, substep %d; writing %d frames",
                      start_frame + f + 1, exc.substep, len(frames))
            status = EXIT_NUMERICAL
            break
        frames.append(state.positions)
        if transfer:
            dense_frames.append(transfer.transform(state.positions))
    out = np.stack(frames) if frames else np.empty((0, len(pos), 3))
    io.write_trajectory(opts["out"], out, config.frame_dt, dtype=opts["trajectory_dtype"], metadata=meta)
    if transfer:
        dense = np.stack(dense_frames) if dense_frames else np.empty((0, transfer.n_points_, 3))
        io.write_trajectory(opts["dense_out"], dense, config.frame_dt, dtype=opts["trajectory_dtype"], metadata=meta)
        if opts.get("gaussians_out") and dense_frames:
            from .transfer import GaussianCloud

            cloud = extra["cloud"]
            rot = transfer.transform_rotations(dense_frames[-1])
            labels = cloud.labels if cloud is not None else None
            scales = cloud.scales if cloud is not None else None
            io.write_gaussians(opts["gaussians_out"], GaussianCloud(dense_frames[-1], rot, scales, labels))
    if opts.get("state_out"):
        io.write_state(opts["state_out"], state, start_frame + max(len(frames) - 1, 0), meta)
    print(f"frames {len(frames)}  points {len(pos)}  rigid {len(part.rigid_indices)}  flex {len(part.flex_indices)}")
    return status


def cmd_fit_params(opts):
    from .sysid import OptimizerConfig, PhysParams, ReferenceTrajectory, group_by_kmeans, optimize

    _require(opts, "reference", "out")
    traj, dt, _ = io.read_trajectory(opts["reference"])
    pos, cons, part, masses, config, material, _ = _build_scene(opts, frame_dt=dt)
    if traj.shape[1] != len(pos):
        raise InvalidInputError(f"reference has {traj.shape[1]} points, scene has {len(pos)}")
    ref = ReferenceTrajectory(traj, dt, part, velocity_scheme=opts["velocity_scheme"])
    seed = int(opts["seed"])
    groups = opts["groups"]
    rest = traj[0]
    if groups == "material":
        if material is None:
            raise InvalidInputError("groups='material' needs a scene with edge materials")
        cgroups = material
        mgroups = np.zeros(len(pos), dtype=np.int64)
    elif groups in (None, "none", 0):
        cgroups = mgroups = None
    else:
        k = int(groups)
        mid = 0.5 * (rest[cons.edges[:, 0]] + rest[cons.edges[:, 1]])
        cgroups = group_by_kmeans(mid, k, seed)
        mgroups = group_by_kmeans(rest, k, seed)
    init = PhysParams.initial(len(pos), cons.n_distance, mass=float(opts["init_mass"]),
                              compliance=float(opts["init_compliance"]),
                              mass_groups=mgroups, compliance_groups=cgroups)
    if not opts["fit_mass"]:
        # Masses are not fitted: use the scene's masses (one group each).
        init.log_mass = np.log(np.asarray(masses, float))
        init.mass_groups = None
    opt = OptimizerConfig(epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]), seed=seed,
                          gradient=opts["gradient"], scheme=opts["scheme"], fit_mass=bool(opts["fit_mass"]))
    res = optimize(ref, cons, init, config, opt)
    doc = res.params.to_dict()
    doc["initial_loss"] = res.initial_loss
    doc["best_loss"] = res.best_loss
    doc["metadata"] = _metadata("fit-params", opts)
    io.dump_json(doc, opts["out"])
    if opts.get("loss_csv"):
        n = max(len(pos) - len(part.rigid_indices), 1)
        rows = [(e + 1, m, m / n, f) for e, (m, f) in enumerate(zip(res.loss_history, res.eval_history[1:]))]
        _write_csv_with_meta(opts["loss_csv"], rows, ["epoch", "sample_loss", "sample_loss_per_point", "full_loss"],
                             doc["metadata"])
    print(f"initial loss {res.initial_loss:.6g}  best loss {res.best_loss:.6g}  "
          f"compliances {np.exp(res.params.log_compliance).tolist()}")
    return EXIT_OK


def _write_csv_with_meta(path, rows, columns, meta):
    io.write_loss_csv(path, rows, columns)
    body = Path(path).read_text()
    Path(path).write_text("# " + json.dumps(meta, sort_keys=True) + "\n" + body)


def cmd_fit_pose(opts):
    from .posefit import LossWeights, PoseSequenceFitter, SilhouetteMask
    from .skinning import Pose

    _require(opts, "rig", "tracked", "out")
    rig = io.read_rig(opts["rig"])
    tracked, _, _ = io.read_trajectory(opts["tracked"])
    cams = io.read_cameras(opts["cameras"]) if opts.get("cameras") else []
    mask_paths = opts.get("masks") or []
    if len(mask_paths) != len(cams):
        raise InvalidInputError(f"{len(mask_paths)} masks given for {len(cams)} cameras")
    masks = [SilhouetteMask(io.read_mask(p), c) for p, c in zip(mask_paths, cams)]
    keypoints = io.read_keypoints(opts["keypoints"]) if opts.get("keypoints") else None
    init_pose, shape = Pose.identity(rig.n_joints), None
    if opts.get("init_pose"):
        poses, shape = io.read_poses(opts["init_pose"])
        init_pose = poses[0]
    w = LossWeights(align=opts["w_align"], verts=opts["w_verts"], pose_reg=opts["w_pose_reg"],
                    shape_reg=opts["w_shape_reg"], track=opts["w_track"], keypoint=opts["w_keypoint"])
    fitter = PoseSequenceFitter(weights=w, fit_first=bool(opts["fit_first"]), fit_shape=bool(opts["fit_shape"]))
    fitter.fit(tracked, rig=rig, initial_pose=init_pose, cameras=cams, masks=masks, keypoints=keypoints, shape=shape)
    extra = {"losses": fitter.losses_, "flagged_frames": fitter.flagged_frames_}
    io.write_poses(opts["out"], fitter.poses_, fitter.shape_, _metadata("fit-pose", opts), extra)
    print(f"frames {len(fitter.poses_)}  flagged {fitter.flagged_frames_}")
    return EXIT_OK


def cmd_embed(opts):
    from .transfer import embed

    _require(opts, "cloud", "tetmesh", "out")
    dense, _, _ = _read_cloud(opts["cloud"])
    mesh, sample = io.read_tetmesh(opts["tetmesh"])
    if sample is None:
        raise InvalidInputError("tetmesh file lacks sample_indices; run `tetsim tetra` on this cloud")
    emb = embed(dense, sample, mesh, tol=float(opts["interior_tol"]))
    io.write_embedding(opts["out"], emb, _metadata("embed", opts))
    print(f"embedded {len(emb)}  interior {int(emb.interior.sum())}  exterior {int(emb.exterior.sum())}")
    return EXIT_OK


def cmd_evaluate(opts):
    from .metrics import IMAGE_SUFFIXES, evaluate_pair, load_image

    _require(opts, "gt", "pred", "out")
    gt_dir, pred_dir = Path(opts["gt"]), Path(opts["pred"])
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    gts = sorted(p for p in gt_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not gts:
        raise InvalidInputError(f"no images in {gt_dir}")
    cols = ["psnr", "ssim", "hf_psnr", "hf_ssim"]
    rows = []
    for g in gts:
        p = pred_dir / g.name
        if not p.exists():
            raise InvalidInputError(f"no prediction matching {g.name} in {pred_dir}")
        m = evaluate_pair(load_image(g), load_image(p), float(opts["sigma"]))
        rows.append([g.name] + [m[c] for c in cols])
    summary = ["mean"] + [float(np.mean([r[i + 1] for r in rows])) for i in range(len(cols))]
    meta = _metadata("evaluate", opts)
    meta["hf_residual_shift"] = 0.5
    _write_csv_with_meta(opts["out"], rows + [summary], ["image"] + cols, meta)
    print("  ".join(f"{c} {v:.4f}" for c, v in zip(cols, summary[1:])))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

_SIM_DEFAULTS = {
    "frame_dt": 1.0 / 30.0, "substeps": 10, "iterations": 20, "gravity": [0.0, -9.81, 0.0],
    "airmesh_threshold": 0.1, "solver_mode": "gauss-seidel",
}
_SCENE_DEFAULTS = {"demo": None, "cloud": None, "tetmesh": None, "mass": 0.01, "compliance": 1e-4, "airmesh": True}

DEFAULTS = {
    "tetra": {"cloud": None, "out": None, "target_count": 10000, "k": 30, "seed": 0},
    "simulate": {**_SCENE_DEFAULTS, **_SIM_DEFAULTS, "out": None, "dense_out": None, "gaussians_out": None,
                 "state_out": None, "resume": None, "driver": None, "rig": None, "poses": None, "params": None,
                 "frames": 0, "swing_amplitude": 0.0, "swing_period": 1.0, "trajectory_dtype": "<f4",
                 "seed": 0},
    "fit-params": {**_SCENE_DEFAULTS, **_SIM_DEFAULTS, "reference": None, "out": None, "loss_csv": None,
                   "groups": 8, "epochs": 60, "batch_size": 8, "gradient": "fd", "scheme": "rprop",
                   "fit_mass": False, "init_mass": 0.01, "init_compliance": 1e-4,
                   "velocity_scheme": "backward", "seed": 0},
    "fit-pose": {"rig": None, "tracked": None, "cameras": None, "masks": None, "keypoints": None,
                 "init_pose": None, "out": None, "fit_first": True, "fit_shape": True, "w_align": 1.0,
                 "w_verts": 1e-2, "w_pose_reg": 1e-3, "w_shape_reg": 1e-3, "w_track": 1.0, "w_keypoint": 1e-1,
                 "seed": 0},
    "embed": {"cloud": None, "tetmesh": None, "out": None, "interior_tol": 1e-9, "seed": 0},
    "evaluate": {"gt": None, "pred": None, "out": None, "sigma": 5.0, "seed": 0},
}

COMMANDS = {"tetra": cmd_tetra, "simulate": cmd_simulate, "fit-params": cmd_fit_params,
            "fit-pose": cmd_fit_pose, "embed": cmd_embed, "evaluate": cmd_evaluate}

_HELP = {
    "tetra": "sample, tetrahedralize and filter a point cloud",
    "simulate": "run the constrained simulation and optional dense transfer",
    "fit-params": "recover masses and compliances from a reference trajectory",
    "fit-pose": "fit rig poses to tracked points, keypoints and masks",
    "embed": "embed a dense cloud in a tet mesh",
    "evaluate": "image metrics between two directories",
}

_CHOICES = {"demo": ["hanging-grid", "two-material"], "solver_mode": ["gauss-seidel", "jacobi"],
            "gradient": ["fd", "forward"], "scheme": ["rprop", "sgd"], "velocity_scheme": ["backward", "bdf2"],
            "trajectory_dtype": ["<f4", "<f8"]}


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _groups(s):
    return s if s in ("material", "none") else int(s)


def build_parser():
    parser = argparse.ArgumentParser(prog="tetsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tetsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=_HELP[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for key, val in defaults.items():
            flag = "--" + key.replace("_", "-")
            kw = {"help": f"default: {val!r}"}
            if key in _CHOICES:
                kw["choices"] = _CHOICES[key]
            if key == "gravity":
                kw.update(nargs=3, type=float)
            elif key == "masks":
                kw.update(nargs="+")
            elif key == "groups":
                kw["type"] = _groups
            elif isinstance(val, bool):
                kw["type"] = _bool
            elif isinstance(val, int):
                kw["type"] = int
            elif isinstance(val, float):
                kw["type"] = float
            p.add_argument(flag, dest=key, **kw)
    return parser


def resolve_options(command, namespace):
    """Merge defaults, the ``--config`` file and explicit flags."""
    opts = dict(DEFAULTS[command])
    cfg_path = getattr(namespace, "config", None)
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{cfg_path}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(cfg, dict):
            raise InvalidInputError(f"{cfg_path}: config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise InvalidInputError(f"{cfg_path}: unknown config keys {unknown} for `{command}`")
        for k, v in cfg.items():
            if k in _CHOICES and v is not None and v not in _CHOICES[k]:
                raise InvalidInputError(f"{cfg_path}: {k} must be one of {_CHOICES[k]}")
        opts.update(cfg)
    for k in DEFAULTS[command]:
        if hasattr(namespace, k):
            opts[k] = getattr(namespace, k)
    return opts


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(ns, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(ns.command, ns)
        return COMMANDS[ns.command](opts)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
