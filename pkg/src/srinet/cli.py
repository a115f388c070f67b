"""Command line interface.

Subcommands cover the reproducible experiment paths: feature extraction,
keypoint visualization, the rotation-invariance property harness, and
training/evaluation with checkpoints, metrics CSVs and rendered figures.
Exit codes: 0 success, 1 property failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from .errors import SrinetError
from .geom import PointCloud, center_cloud, normalize_scale, random_rotation, select_axes
from .graph import init_graph_agg, graph_aggregate_forward, knn_graph
from .keypoint import estimate_normals, keypoint_response
from .net import (
    ModelConfig,
    TrainConfig,
    build_model,
    encode_cloud,
    evaluate,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
    stack_encoded,
    train,
    write_metrics_csv,
)

FEATURE_HEADERS = {
    "projection": ["c1", "c2", "c3", "r"],
    "ppf": ["cos_nr_d", "cos_nx_d", "cos_nr_nx", "dist"],
    "raw_xyz": ["x", "y", "z"],
}

INVARIANCE_TOLERANCES = {"features": 1e-7, "side_branch": 1e-6, "logits": 1e-5}

CONFIG_KEYS = {
    "task": str, "encoding": str, "k": int, "fusion": str, "ablate": str,
    "seed": int, "epochs": int, "batch_size": int, "lr": float,
    "points": int, "per_class": int, "noise": float, "dataset": str,
    "manifest": str, "output": str, "response_k": int, "eval_every": int,
    "jitter_sigma": float, "jitter_clip": float,
}


class UsageError(SrinetError):
    pass


def parse_config_file(path) -> dict:
    """Flat key=value lines with # comments; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](val)
        except ValueError:
            raise UsageError(
                f"{path}:{lineno}: bad value {val!r} for {key}") from None
    return values


def merge_config(args, keys) -> dict:
    """File values first, then flags override; SRINET_SEED backstops seed."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    if merged.get("seed") is None:
        env = os.environ.get("SRINET_SEED")
        merged["seed"] = int(env) if env else 0
    return merged


def load_input_cloud(path, n_points, seed) -> PointCloud:
    """PLY files are read as point data; OFF meshes are surface-sampled
    with face normals (vertex clouds when the mesh has no faces)."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".ply" or text.lstrip().startswith("ply"):
        return dio.parse_ply(text)
    mesh = dio.parse_off(text)
    if len(mesh.faces) == 0:
        return PointCloud(mesh.vertices)
    return dio.sample_surface(mesh, n_points, seed)


def _write_axes_csv(path, axes):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "x", "y", "z"])
        for name, vec in (("a1", axes.a1), ("a2", axes.a2), ("a3", axes.a3)):
            writer.writerow([name] + [f"{v:.12g}" for v in vec])


def cmd_extract(args) -> int:
    cfg = merge_config(args, ["seed", "points"])
    seed = cfg["seed"]
    cloud = load_input_cloud(args.input, cfg.get("points", 1024), seed)
    if args.rotate is not None:
        cloud = random_rotation(args.rotate).apply_cloud(cloud)
    mcfg = ModelConfig(task="classify", encoding=args.encoding,
                       use_graph_agg=False, use_keypoint=False)
    enc = encode_cloud(cloud, mcfg)

    out = Path(args.output)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_HEADERS[args.encoding])
        for row in enc.feats:
            writer.writerow([f"{v:.12g}" for v in row])

    centered, _ = center_cloud(cloud)
    axes = select_axes(normalize_scale(centered))
    _write_axes_csv(out.with_name(out.stem + "_axes" + out.suffix), axes)
    print(f"wrote {len(enc.feats)}x{enc.feats.shape[1]} features to {out}")
    return 0


def cmd_keypoints(args) -> int:
    cfg = merge_config(args, ["seed", "points", "k"])
    cloud = load_input_cloud(args.input, cfg.get("points", 2048), cfg["seed"])
    k = cfg.get("k", 16)
    if not 1 <= k < cloud.n:
        raise UsageError(f"need 1 <= k < N, got k={k} for N={cloud.n}")
    normals = cloud.normals
    if normals is None:
        normals = estimate_normals(cloud.points, max(3, k))
    responses = keypoint_response(normals, knn_graph(cloud.points, k))
    dio.write_ply_colored(cloud, responses, args.output)
    print(f"wrote keypoint responses for {cloud.n} points to {args.output}")
    return 0


def _invariance_records(encoding: str, seed: int, trials: int):
    """Deviation of features / side branch / logits under random rotations."""
    mcfg = ModelConfig(task="classify", num_classes=5,
                       encoding=encoding, backbone=(16, 24, 48),
                       side=(16, 24), dense=(32, 16), k_neighbors=6,
                       response_k=8)
    model = build_model(mcfg, seed=seed)
    ga = init_graph_agg(6, mcfg.input_dim, 16, hidden=8, seed=seed + 1)
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for trial in range(trials):
        pts = rng.standard_normal((48, 3))
        cloud, _ = center_cloud(PointCloud(pts))
        rot = random_rotation(seed * 7 + trial)
        turned = rot.apply_cloud(cloud)

        enc_a = encode_cloud(cloud, mcfg)
        enc_b = encode_cloud(turned, mcfg)
        records.append(("features", trial,
                        float(np.max(np.abs(enc_b.feats - enc_a.feats)))))

        side_a, _ = graph_aggregate_forward(ga, enc_a.side_feats)
        side_b, _ = graph_aggregate_forward(ga, enc_b.side_feats)
        records.append(("side_branch", trial,
                        float(np.max(np.abs(side_b - side_a)))))

        logits_a, _ = forward_batch(model, *stack_encoded([enc_a]))
        logits_b, _ = forward_batch(model, *stack_encoded([enc_b]))
        records.append(("logits", trial,
                        float(np.max(np.abs(logits_b - logits_a)))))
    return records


def cmd_invariance_test(args) -> int:
    cfg = merge_config(args, ["seed", "trials"])
    trials = cfg.get("trials", 100)
    if trials < 1:
        raise UsageError("need at least one trial")
    records = _invariance_records(args.encoding, cfg["seed"], trials)

    worst = {}
    for stage, _, dev in records:
        worst[stage] = max(worst.get(stage, 0.0), dev)
    failed = False
    for stage in ("features", "side_branch", "logits"):
        tol = INVARIANCE_TOLERANCES[stage]
        ok = worst[stage] < tol
        failed = failed or not ok
        print(f"{stage:12s} max deviation {worst[stage]:.3e} "
              f"(tolerance {tol:.0e}) {'ok' if ok else 'FAIL'}")

    if args.output:
        outdir = Path(args.output)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "invariance_report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "trial", "deviation"])
            for stage, trial, dev in records:
                writer.writerow([stage, trial, f"{dev:.6e}"])
        from .figures import save_invariance_report
        save_invariance_report([(s, d) for s, _, d in records],
                               INVARIANCE_TOLERANCES,
                               outdir / "invariance_report.png")
    return 1 if failed else 0


def _build_dataset(cfg) -> list:
    kind = cfg.get("dataset", "synth")
    if kind == "synth":
        return dio.make_synth_dataset(per_class=cfg.get("per_class", 60),
                                      n_points=cfg.get("points", 96),
                                      seed=cfg["seed"] + 7,
                                      noise=cfg.get("noise", 0.01))
    if kind == "manifest":
        manifest = cfg.get("manifest")
        if not manifest:
            raise UsageError("dataset=manifest needs --manifest PATH")
        samples = []
        for i, (path, class_id) in enumerate(dio.load_manifest(manifest)):
            mesh = dio.load_off(path)
            cloud = dio.sample_surface(mesh, cfg.get("points", 96),
                                       seed=cfg["seed"] * 100_003 + i)
            samples.append(dio.DatasetSample(
                PointCloud(cloud.points, cloud.normals, class_id), class_id))
        return samples
    raise UsageError(f"unknown dataset kind {kind!r}, want synth or manifest")


def _model_config(cfg, num_classes, num_parts) -> ModelConfig:
    ablate = cfg.get("ablate", "none")
    if ablate not in ("none", "ga", "kpd"):
        raise UsageError(f"unknown ablation {ablate!r}, want ga, kpd or none")
    task = cfg.get("task", "classify")
    return ModelConfig(
        task=task,
        encoding=cfg.get("encoding", "projection"),
        num_classes=num_classes,
        num_parts=num_parts,
        backbone=(24, 32, 64, 128),
        side=(24, 48),
        dense=(64, 32),
        k_neighbors=cfg.get("k"),
        response_k=cfg.get("response_k", 12),
        fusion=cfg.get("fusion", "sum"),
        use_graph_agg=ablate != "ga",
        use_keypoint=ablate != "kpd",
        transform_hidden=16,
    )


def _segment_filter(samples, task):
    if task != "segment":
        return samples
    kept = [s for s in samples if s.cloud.part_labels is not None]
    if not kept:
        raise UsageError("segmentation needs part-labeled samples")
    return kept


def cmd_train(args) -> int:
    cfg = merge_config(args, ["task", "encoding", "k", "fusion", "ablate",
                              "seed", "epochs", "batch_size", "lr", "points",
                              "per_class", "noise", "dataset", "manifest",
                              "output", "eval_every"])
    outdir = Path(cfg.get("output", "runs/train"))
    outdir.mkdir(parents=True, exist_ok=True)

    samples = _segment_filter(_build_dataset(cfg), cfg.get("task", "classify"))
    num_classes = max(s.class_id for s in samples) + 1
    num_parts = 2
    if cfg.get("task", "classify") == "segment":
        num_parts = 1 + max(int(s.cloud.part_labels.max()) for s in samples)
    train_set, test_set = dio.split_dataset(samples, 0.8, seed=cfg["seed"])

    tcfg = TrainConfig(epochs=cfg.get("epochs", 60),
                       batch_size=cfg.get("batch_size", 16),
                       lr0=cfg.get("lr", 1e-3),
                       jitter_sigma=cfg.get("jitter_sigma", 0.01),
                       jitter_clip=cfg.get("jitter_clip", 0.05),
                       seed=cfg["seed"],
                       eval_every=cfg.get("eval_every", 0))

    if args.resume:
        model, opt_state, start_epoch = load_checkpoint(args.resume)
        start_epoch = start_epoch or 0
    else:
        model = build_model(
            _model_config(cfg, max(num_classes, 2), max(num_parts, 2)),
            seed=cfg["seed"])
        opt_state, start_epoch = None, 0

    metrics, opt_state = train(model, train_set, tcfg, eval_data=test_set,
                               start_epoch=start_epoch, opt_state=opt_state,
                               verbose=True)
    final = evaluate(model, test_set)
    metrics.append({"epoch": tcfg.epochs - 1, "split": "test",
                    "loss": final["loss"], "accuracy": final["accuracy"],
                    "iou": final["iou"]})

    write_metrics_csv(outdir / "metrics.csv", metrics)
    save_checkpoint(outdir / "checkpoint.json", model, opt_state,
                    epoch=tcfg.epochs)
    from .figures import save_training_curves
    save_training_curves(metrics, outdir / "training_curves.png")
    print(f"final test accuracy {final['accuracy']:.4f}"
          + (f" iou {final['iou']:.4f}" if final["iou"] is not None else ""))
    print(f"wrote {outdir}/metrics.csv, checkpoint.json, training_curves.png")
    return 0


def cmd_eval(args) -> int:
    cfg = merge_config(args, ["seed", "points", "per_class", "noise",
                              "dataset", "manifest", "output"])
    model, _, _ = load_checkpoint(args.checkpoint)
    samples = _segment_filter(_build_dataset(cfg), model.config.task)
    _, test_set = dio.split_dataset(samples, 0.8, seed=cfg["seed"])

    rotate = args.rotate is not None
    result = evaluate(model, test_set, rotate=rotate,
                      seed=args.rotate if rotate else 0)
    tag = "AR" if rotate else "NR"
    print(f"{tag} accuracy {result['accuracy']:.4f}"
          + (f" iou {result['iou']:.4f}" if result["iou"] is not None else ""))

    if cfg.get("output"):
        outdir = Path(cfg["output"])
        outdir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(outdir / "metrics.csv",
                          [{"epoch": 0, "split": f"eval-{tag.lower()}",
                            "loss": result["loss"],
                            "accuracy": result["accuracy"],
                            "iou": result["iou"]}])
        with open(outdir / "predictions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "prediction"])
            for i, s in enumerate(test_set):
                pred = result["predictions"][i]
                pred = int(pred) if np.ndim(pred) == 0 else "|".join(
                    str(int(p)) for p in pred)
                writer.writerow([i, s.class_id, pred])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srinet",
        description="Rotation-invariant point cloud features, classification "
                    "and segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="random seed (falls back to SRINET_SEED, then 0)")
        p.add_argument("--config", default=None,
                       help="key=value config file; flags override it")

    p = sub.add_parser("extract", help="write per-point features as CSV")
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--encoding", choices=list(FEATURE_HEADERS),
                   default="projection")
    p.add_argument("--points", type=int, default=None,
                   help="sample count when the input is a mesh")
    p.add_argument("--rotate", type=int, nargs="?", const=1234, default=None,
                   metavar="SEED", help="rotate the input first")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("keypoints", help="write a response-colored PLY")
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.set_defaults(func=cmd_keypoints)

    p = sub.add_parser("invariance-test",
                       help="check rotation invariance of every stage")
    add_common(p)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--encoding", choices=list(FEATURE_HEADERS),
                   default="projection")
    p.add_argument("--output", default=None,
                   help="directory for the CSV report and figure")
    p.set_defaults(func=cmd_invariance_test)

    p = sub.add_parser("train", help="train a model on synthetic or mesh data")
    add_common(p)
    p.add_argument("--task", choices=["classify", "segment"], default=None)
    p.add_argument("--encoding", choices=list(FEATURE_HEADERS), default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--fusion", choices=["sum", "mul"], default=None)
    p.add_argument("--ablate", choices=["ga", "kpd", "none"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--dataset", choices=["synth", "manifest"], default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally rotated")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rotate", type=int, nargs="?", const=1234, default=None,
                   metavar="SEED")
    p.add_argument("--dataset", choices=["synth", "manifest"], default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (SrinetError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
