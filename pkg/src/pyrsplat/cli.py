"""Operator command line: init-points, train, render, eval, serve.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Machine-readable tables go to stdout; human logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, field as field_mod, initialize, metrics, scene, train
from .errors import DataError, NumericalError
from .field import FieldConfig
from .initialize import KMeansConfig, PyramidSpec
from .nets import Embeddings, make_correction_net, make_weighting_net
from .scene import SceneModel
from .splat import WeightingMode
from .train import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

WEIGHTING_FLAGS = {
    "learned": "weighted",
    "uniform": "uniform",
    "random": "random",
    "top1": "top1",
    "plain": "plain",
}

# preset -> overrides applied before explicit flags
PRESETS = {
    "desk": {
        "field_resolution": 48, "field_steps": 800, "field_batch": 1024,
        "points": 60_000, "n1": 800, "clusters": 64,
        "lr_position": 1.6e-4, "iterations": 30_000,
        "densify_grad_threshold": 3e-4,
    },
    "paper": {
        "field_resolution": 128, "field_steps": 5000, "field_batch": 4096,
        "points": 4_800_000, "n1": 800_000, "clusters": 5000,
        "lr_position": 1.6e-5, "iterations": 200_000,
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        print(f"usage error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(line: str) -> None:
    print(line, file=sys.stderr, flush=True)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (default: all cores)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="named hyperparameter presets: desk (toy scale) or paper")


def _apply_threads(args) -> None:
    if args.threads:
        import numba

        numba.set_num_threads(max(1, args.threads))


def _preset(args, key, default):
    """Flag value > preset value > default."""
    explicit = getattr(args, key.replace("-", "_"), None)
    if explicit is not None:
        return explicit
    if args.preset and key in PRESETS[args.preset]:
        return PRESETS[args.preset][key]
    return default


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyrsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-points",
                       help="train the coarse field and build the pyramid")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--levels", type=int, default=3,
                   help="pyramid level count L (default 3)")
    p.add_argument("--n1", type=int, default=None,
                   help="base subset size N_1; level l gets l*N_1 (default 800000)")
    p.add_argument("--points", type=int, default=None,
                   help="dense cloud target size (default 4800000)")
    p.add_argument("--clusters", type=int, default=None,
                   help="K-means cluster count (default 5000)")
    p.add_argument("--embed-dim", type=int, default=64,
                   help="cluster/appearance embedding width (default 64)")
    p.add_argument("--field-resolution", type=int, default=None,
                   help="voxel grid resolution (default 128)")
    p.add_argument("--field-steps", type=int, default=None,
                   help="field training steps (default 5000)")
    p.add_argument("--field-batch", type=int, default=None,
                   help="field rays per batch (default 4096)")
    p.add_argument("--kmeans-full-batch", action="store_true",
                   help="use full-batch Lloyd iterations instead of mini-batch")
    _add_common(p)

    p = sub.add_parser("train", help="optimize a pyramid from init artifacts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", required=True, help="init-points output directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int, default=None,
                   help="training iterations (default 30000; paper preset 200000)")
    p.add_argument("--lam", type=float, default=0.8,
                   help="loss balance: lam*MSE + (1-lam)*(1-SSIM) (default 0.8)")
    p.add_argument("--lr-position", type=float, default=None,
                   help="position lr, x scene extent (default 1.6e-5)")
    p.add_argument("--lr-networks", type=float, default=3e-4,
                   help="weighting/correction net lr (default 3e-4)")
    p.add_argument("--lr-embeddings", type=float, default=0.1,
                   help="embedding lr (default 0.1)")
    p.add_argument("--weighting", choices=sorted(WEIGHTING_FLAGS),
                   default="learned",
                   help="level weighting mode (default learned)")
    p.add_argument("--color-correction", choices=["on", "off"], default="on",
                   help="per-cluster color correction (default on)")
    p.add_argument("--structural-term", choices=["one_minus", "raw"],
                   default="one_minus",
                   help="structural loss form: 1-SSIM (default) or literal +SSIM")
    p.add_argument("--densify-interval", type=int, default=100)
    p.add_argument("--densify-stop", type=int, default=15_000)
    p.add_argument("--densify-grad-threshold", type=float, default=None,
                   help="mean 2D gradient threshold for split/clone (default 2e-4)")
    p.add_argument("--opacity-reset-interval", type=int, default=3000)
    p.add_argument("--prune-opacity", type=float, default=0.005)
    p.add_argument("--level-reassign-interval", type=int, default=1000)
    p.add_argument("--log-interval", type=int, default=100)
    p.add_argument("--white-background", action="store_true")
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="deterministic scheduling (default on)")
    _add_common(p)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default=None,
                   help="dataset supplying cameras (default: checkpoint poses)")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--index", type=int, action="append", default=None,
                   help="render specific camera indices (repeatable)")
    p.add_argument("--heatmaps", action="store_true",
                   help="also write per-level weight-mass heatmaps")
    _add_common(p)

    p = sub.add_parser("eval", help="PSNR/SSIM table over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    _add_common(p)

    p = sub.add_parser("serve", help="interactive render service + viewer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--static-dir", default=None,
                   help="viewer bundle directory (default: bundled fallback)")
    p.add_argument("--workers", type=int, default=2,
                   help="render worker threads (default 2)")
    _add_common(p)

    p = sub.add_parser("reassign-clusters",
                       help="recompute nearest-centroid assignments in place")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


def cmd_init_points(args) -> int:
    t0 = time.time()
    dataset = dataio.load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fc = FieldConfig(
        resolution=_preset(args, "field_resolution", 128),
        steps=_preset(args, "field_steps", 5000),
        batch_rays=_preset(args, "field_batch", 4096),
        seed=args.seed,
    )
    _log(f"training field ({fc.resolution}^3, {fc.steps} steps)")
    f = field_mod.train_field(dataset, fc, log=_log)
    _log(f"field done in {time.time() - t0:.1f}s")

    spec = PyramidSpec(n_levels=args.levels, n_base=_preset(args, "n1", 800_000))
    target = max(_preset(args, "points", 4_800_000), spec.sizes[-1])
    cloud = initialize.generate_point_cloud(
        f, dataset.cameras, target, seed=args.seed
    )
    _log(f"point cloud: {cloud.count} points in {time.time() - t0:.1f}s")
    dataio.export_point_ply(out / "cloud.ply", cloud.positions, cloud.colors)

    subsets = initialize.sample_multiscale(cloud, spec, seed=args.seed)
    for lvl, sub in enumerate(subsets, start=1):
        dataio.export_point_ply(out / f"level_{lvl}.ply", sub.positions, sub.colors)
        print(f"level\t{lvl}\t{sub.count}")

    k = _preset(args, "clusters", 5000)
    table = initialize.kmeans_centroids(
        cloud, k,
        KMeansConfig(seed=args.seed, full_batch=args.kmeans_full_batch),
    )
    dataio.export_point_ply(
        out / "centroids.ply", table.centroids, np.full((k, 3), 0.5)
    )

    centers = np.stack([c.center for c in dataset.cameras])
    extent = 1.1 * float(
        np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    )
    pyramid = initialize.build_pyramid(subsets, scene_extent=extent)
    pyramid.clusters = initialize.assign_clusters(pyramid.positions, table)
    rng = np.random.default_rng(args.seed)
    model = SceneModel(
        gaussians=pyramid,
        centroids=table.centroids,
        embeddings=Embeddings.create(k, 1, dim=args.embed_dim, rng=rng),
        weight_net=make_weighting_net(args.levels, args.embed_dim, rng),
        correction_net=make_correction_net(args.embed_dim, rng),
        n_levels=args.levels,
        aabb=f.aabb,
        scene_extent=extent,
    )
    dataio.save_checkpoint(model, out / "init.pygs", field=f,
                           config={"stage": "init", "seed": args.seed})
    counts = ",".join(str(c) for c in pyramid.level_counts(args.levels))
    print(f"pyramid\t{pyramid.n}\t{counts}")
    print(f"time\t{time.time() - t0:.1f}")
    return EXIT_OK


def _camera_meta(dataset, train_indices) -> list[dict]:
    cams = []
    for row, i in enumerate(train_indices):
        c = dataset.cameras[i]
        cams.append({
            "row": row,
            "frame": i,
            "c2w": c.c2w().reshape(-1).tolist(),
            "width": c.width,
            "height": c.height,
            "fov_y": float(2.0 * np.arctan2(c.height / 2.0, c.fy)),
        })
    return cams


def cmd_train(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    ckpt = dataio.load_checkpoint(Path(args.init) / "init.pygs"
                                  if Path(args.init).is_dir() else args.init)
    model = ckpt.model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_idx, test_idx = dataset.split()
    cfg = TrainConfig(
        lam=args.lam,
        iterations=_preset(args, "iterations", 30_000),
        lr_position=_preset(args, "lr_position", 1.6e-5),
        lr_networks=args.lr_networks,
        lr_embeddings=args.lr_embeddings,
        densify_interval=args.densify_interval,
        densify_stop=args.densify_stop,
        densify_grad_threshold=_preset(args, "densify_grad_threshold", 2e-4),
        opacity_reset_interval=args.opacity_reset_interval,
        prune_opacity=args.prune_opacity,
        level_reassign_interval=args.level_reassign_interval,
        weighting=WEIGHTING_FLAGS[args.weighting],
        color_correction=args.color_correction == "on",
        structural_term=args.structural_term,
        background=(1.0, 1.0, 1.0) if args.white_background else (0.0, 0.0, 0.0),
        log_interval=args.log_interval,
        seed=args.seed,
        deterministic=args.deterministic,
    )
    rows = {frame: row for row, frame in enumerate(train_idx)}
    state = train.init_train_state(model, cfg, n_appearance=len(train_idx),
                                   appearance_rows=rows)
    config_blob = {
        "train": {k: v for k, v in vars(cfg).items() if k != "background"},
        "background": list(cfg.background),
        "weighting_flag": args.weighting,
        "color_correction_flag": args.color_correction,
        "cameras": _camera_meta(dataset, train_idx),
    }

    ckpt_path = out / "model.pygs"

    def save(st):
        dataio.save_checkpoint(
            st.model, ckpt_path, config=config_blob,
            moments=train.moments_to_arrays(st),
        )

    probe = test_idx[0] if test_idx else train_idx[0]
    try:
        train.run_training(
            state, dataset, train_idx, probe_index=probe,
            iterations=cfg.iterations,
            log=lambda line: print(line, flush=True),
            checkpoint_fn=save,
        )
    except NumericalError:
        save(state)  # keep the last good state around
        raise
    save(state)
    _log(f"checkpoint written to {ckpt_path}")
    return EXIT_OK


def _dataset_indices(dataset, split: str, explicit) -> list[int]:
    if explicit:
        bad = [i for i in explicit if not 0 <= i < len(dataset)]
        if bad:
            raise DataError(f"camera index out of range: {bad}")
        return explicit
    train_idx, test_idx = dataset.split()
    return {"train": train_idx, "test": test_idx,
            "all": list(range(len(dataset)))}[split]


def _appearance_rows(ckpt) -> dict:
    rows = {}
    if ckpt.config and "cameras" in ckpt.config:
        for cammeta in ckpt.config["cameras"]:
            rows[cammeta["frame"]] = cammeta["row"]
    return rows


def cmd_render(args) -> int:
    ckpt = dataio.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _appearance_rows(ckpt)
    if args.dataset:
        dataset = dataio.load_dataset(args.dataset)
        indices = _dataset_indices(dataset, args.split, args.index)
        cams = [(i, dataset.cameras[i]) for i in indices]
    else:
        if not ckpt.config or "cameras" not in ckpt.config:
            raise DataError("checkpoint stores no cameras; pass --dataset")
        cams = []
        for cammeta in ckpt.config["cameras"]:
            cam = _camera_from_meta(cammeta)
            cams.append((cammeta["frame"], cam))
        if args.index:
            chosen = set(args.index)
            cams = [(i, c) for i, c in cams if i in chosen]
            if len(cams) != len(chosen):
                raise DataError("camera index out of range")
    for i, cam in cams:
        render_out, _ = scene.render_view(
            ckpt.model, cam, appearance_index=rows.get(i)
        )
        dataio.save_image(out / f"render_{i:05d}.png", render_out.image)
        if args.heatmaps:
            for lvl in range(1, ckpt.model.n_levels + 1):
                heat = render_out.level_mass[:, :, lvl - 1]
                dataio.save_image(
                    out / f"mass_{i:05d}_level{lvl}.png",
                    np.repeat(np.clip(heat, 0, 1)[:, :, None], 3, axis=2),
                )
        print(f"rendered\t{i}")
    return EXIT_OK


def _camera_from_meta(cammeta: dict):
    from .geom import Camera

    c2w = np.array(cammeta["c2w"], dtype=np.float64).reshape(4, 4)
    h, w = cammeta["height"], cammeta["width"]
    fy = h / (2.0 * np.tan(cammeta["fov_y"] / 2.0))
    return Camera(
        w2c=np.linalg.inv(c2w), fx=fy, fy=fy, cx=w / 2.0, cy=h / 2.0,
        width=w, height=h, index=cammeta["frame"],
    )


def cmd_eval(args) -> int:
    ckpt = dataio.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.dataset)
    indices = _dataset_indices(dataset, args.split, None)
    rows = _appearance_rows(ckpt)
    results = train.evaluate(ckpt.model, dataset, indices, appearance_rows=rows)
    print("index\tpsnr\tssim")
    for i, psnr, ssim in results:
        print(f"{i}\t{psnr:.4f}\t{ssim:.6f}")
    if results:
        mean_psnr = float(np.mean([r[1] for r in results]))
        mean_ssim = float(np.mean([r[2] for r in results]))
        print(f"mean\t{mean_psnr:.4f}\t{mean_ssim:.6f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from . import serve as serve_mod

    ckpt = dataio.load_checkpoint(args.checkpoint)
    serve_mod.serve(
        ckpt, host=args.host, port=args.port,
        static_dir=args.static_dir, workers=args.workers,
    )
    return EXIT_OK


def cmd_reassign_clusters(args) -> int:
    ckpt = dataio.load_checkpoint(args.checkpoint)
    table = initialize.ClusterTable(ckpt.model.centroids.astype(np.float64))
    ckpt.model.gaussians.clusters = initialize.assign_clusters(
        ckpt.model.gaussians.positions.astype(np.float64), table
    )
    dataio.save_checkpoint(ckpt.model, args.out, config=ckpt.config,
                           moments=ckpt.moments, field=ckpt.field)
    print(f"reassigned\t{ckpt.model.gaussians.n}")
    return EXIT_OK


COMMANDS = {
    "init-points": cmd_init_points,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "reassign-clusters": cmd_reassign_clusters,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args)
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError,) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
