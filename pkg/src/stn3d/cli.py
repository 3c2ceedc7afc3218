"""Command-line entry point: data generation, training, evaluation, dumps, analysis.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.  Every
subcommand echoes its fully resolved configuration, and commands with an
output directory also write it there as ``resolved.cfg`` (key=value lines).
A ``--config FILE`` of key=value lines supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import viz
from .autograd import backward, finite_diff, relative_error, softmax_cross_entropy
from .geometry import PointCloud
from .metrics import neighborhood_std_stats, per_point_neighbor_std, welch_t_test
from .network import (
    BlockConfig,
    CheckpointError,
    Network,
    NetworkConfig,
    TransformerSpec,
    default_network_config,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .neighborhood import graph_to_text
from .shapes import (
    AUGMENT_MODES,
    KINDS,
    CloudParseError,
    Dataset,
    DatasetConfig,
    load_dataset,
    make_dataset,
    read_cloud,
    write_cloud,
    write_dataset,
)
from .training import (
    TrainConfig,
    TrainingError,
    ablation_graphs,
    ablation_layers,
    evaluate,
    rows_to_csv,
    run_dir_name,
    train,
    write_report,
)

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        raise UsageError(message)


def _add_common(parser: _Parser, out_dir_default=None) -> None:
    parser.add_argument("--seed", type=int, default=0, help="master seed for this command")
    parser.add_argument("--out-dir", default=out_dir_default,
                        help="directory for artifacts (reports, dumps, figures)")
    parser.add_argument("--config", default=None,
                        help="key=value file supplying defaults; flags override")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip rendering matplotlib figures")


def _add_net_flags(parser: _Parser) -> None:
    parser.add_argument("--family", choices=("fixed", "affine", "projective", "deformable"),
                        default="deformable")
    parser.add_argument("--blocks", type=int, default=3)
    parser.add_argument("--graphs", type=int, default=4, help="transformers per block")
    parser.add_argument("--feature-width", type=int, default=32)
    parser.add_argument("--hidden", type=int, default=64, help="edge-MLP hidden width")
    parser.add_argument("--k-nn", type=int, default=10)
    parser.add_argument("--head", choices=("segmentation", "classification"),
                        default="segmentation")
    parser.add_argument("--head-widths", default="256,256",
                        help="comma-separated head MLP widths")


def _add_train_flags(parser: _Parser) -> None:
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--freeze-transforms", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="stn3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a labeled synthetic dataset")
    p.add_argument("--kinds", default=",".join(KINDS), help="comma-separated shape kinds")
    p.add_argument("--per-kind", type=int, default=100)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--augment", choices=AUGMENT_MODES, default="none")
    _add_common(p)

    p = sub.add_parser("train", help="train a network and write checkpoint + report")
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    _add_net_flags(p)
    _add_train_flags(p)
    _add_common(p, out_dir_default="runs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _add_common(p)

    p = sub.add_parser("transform-dump", help="write per-transformer transformed clouds")
    p.add_argument("--checkpoint", default=None,
                   help="trained model; omitted = fresh --seed initialization")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="shape index within the dataset")
    _add_net_flags(p)
    _add_common(p, out_dir_default="dumps")

    p = sub.add_parser("knn-dump", help="write per-transformer affinity graphs as text")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    _add_net_flags(p)
    _add_common(p, out_dir_default="dumps")

    p = sub.add_parser("stats", help="neighborhood-spread reduction and Welch t-test")
    p.add_argument("--before", default=None, help="cloud file (direct two-file mode)")
    p.add_argument("--after", default=None, help="cloud file (direct two-file mode)")
    p.add_argument("--checkpoint", default=None, help="model mode: analyze its transformers")
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--k", type=int, default=8, help="neighborhood size for the statistics")
    p.add_argument("--max-shapes", type=int, default=32,
                   help="cap on analyzed shapes in model mode")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference audit of a random small network")
    p.add_argument("--samples", type=int, default=60,
                   help="number of audited parameter entries (>= 50)")
    p.add_argument("--points", type=int, default=24)
    _add_common(p)

    p = sub.add_parser("ablate", help="transformer-count and per-layer ablation tables")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("graphs", "layers"), required=True)
    _add_net_flags(p)
    _add_train_flags(p)
    _add_common(p, out_dir_default="runs")

    return parser


# ---------------------------------------------------------------------------
# config-file defaults and echoing


def _load_config_file(path: str) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise RuntimeFailure(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_defaults(parser: _Parser, argv: list[str]) -> list[str]:
    """Install key=value file entries as parser defaults before real parsing."""
    if "--config" not in argv:
        return argv
    probe = argv[argv.index("--config") + 1:]
    if not probe:
        raise UsageError("--config requires a file path")
    values = _load_config_file(probe[0])
    # find the subcommand's parser to validate keys against
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    command = next((a for a in argv if not a.startswith("-")), None)
    if sub_actions and command in sub_actions[0].choices:
        sub = sub_actions[0].choices[command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        converted = {}
        for action in sub._actions:
            if action.dest in values:
                raw = values[action.dest]
                if isinstance(action, (argparse._StoreTrueAction,)):
                    converted[action.dest] = raw.lower() in ("1", "true", "yes")
                elif action.type is not None:
                    converted[action.dest] = action.type(raw)
                else:
                    converted[action.dest] = raw
        sub.set_defaults(**converted)
    return argv


def _echo_resolved(args, keys: list[str], out_dir: Path | None) -> None:
    resolved = {k: getattr(args, k) for k in keys}
    lines = [f"{k.replace('_', '-')}={resolved[k]}" for k in sorted(resolved)]
    print("resolved config:")
    for line in lines:
        print("  " + line)
    if out_dir is not None:
        (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n")


def _net_config_from_args(args, num_classes: int) -> NetworkConfig:
    head_widths = tuple(int(w) for w in str(args.head_widths).split(",") if w)
    return default_network_config(
        args.family, num_classes, n_blocks=args.blocks, n_transformers=args.graphs,
        feature_width=args.feature_width, hidden=(args.hidden,), k_nn=args.k_nn,
        head=args.head, head_widths=head_widths, seed=args.seed)


def _load_data(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise RuntimeFailure(str(exc)) from exc
    except CloudParseError as exc:
        raise RuntimeFailure(f"malformed dataset: {exc}") from exc


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise RuntimeFailure(f"missing checkpoint: {exc}") from exc
    except CheckpointError as exc:
        raise RuntimeFailure(str(exc)) from exc


def _check_compat(cfg: NetworkConfig, dataset: Dataset) -> None:
    if cfg.head == "segmentation":
        needed = dataset.num_parts()
        if cfg.num_classes < needed:
            raise RuntimeFailure(f"checkpoint/config mismatch: network predicts "
                                 f"{cfg.num_classes} parts but the dataset has {needed}")
    else:
        if cfg.num_classes != len(dataset.config.kinds):
            raise RuntimeFailure(f"checkpoint/config mismatch: network predicts "
                                 f"{cfg.num_classes} classes for {len(dataset.config.kinds)} kinds")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.out_dir is None:
        raise UsageError("gen-data requires --out-dir (the dataset directory)")
    kinds = tuple(k for k in args.kinds.split(",") if k)
    for kind in kinds:
        if kind not in KINDS:
            raise UsageError(f"unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    config = DatasetConfig(kinds=kinds, per_kind=args.per_kind, n_points=args.points,
                           seed=args.seed, augment=args.augment)
    dataset = make_dataset(config)
    out = viz.ensure_dir(args.out_dir)
    write_dataset(dataset, out)
    _echo_resolved(args, ["kinds", "per_kind", "points", "augment", "seed", "out_dir"], out)
    if not args.no_figures:
        samples = [(kind, dataset.shapes[dataset.kinds.index(kind)].points,
                    dataset.shapes[dataset.kinds.index(kind)].part_labels)
                   for kind in kinds]
        viz.save_cloud_grid(out / "preview.png", samples, title="one sample per kind")
    counts = {s: len(dataset.split_indices(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(dataset)} clouds to {out} (splits: {counts})")
    return 0


def cmd_train(args) -> int:
    dataset = _load_data(args.data)
    num_classes = dataset.num_parts() if args.head == "segmentation" else len(dataset.config.kinds)
    net_cfg = _net_config_from_args(args, num_classes)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                            seed=args.seed, freeze_transforms=args.freeze_transforms)
    run_dir = viz.ensure_dir(Path(args.out_dir) /
                             run_dir_name(net_cfg, train_cfg, dataset.config.to_dict()))
    _echo_resolved(args, ["data", "family", "blocks", "graphs", "feature_width", "hidden",
                          "k_nn", "head", "head_widths", "epochs", "batch", "lr",
                          "freeze_transforms", "seed", "out_dir"], run_dir)
    (run_dir / "config.json").write_text(json.dumps(
        {"network": net_cfg.to_dict(), "train": train_cfg.to_dict(),
         "dataset": dataset.config.to_dict()}, indent=2, sort_keys=True) + "\n")

    result = train(dataset, net_cfg, train_cfg)
    save_checkpoint(run_dir / "checkpoint.ckpt", result.net_cfg, result.params)
    write_report(result.report, run_dir / "report.json")
    if not args.no_figures and result.report.epochs:
        viz.save_loss_curves(run_dir / "loss_curves.png", result.report.to_dict())
    if result.report.diverged_at is not None:
        print(f"training diverged at epoch {result.report.diverged_at}; "
              f"artifacts in {run_dir} reflect the last good epoch", file=sys.stderr)
        return 2
    metric = result.report.metric_name
    print(f"run dir: {run_dir}")
    print(f"best epoch {result.report.best_epoch}, "
          f"test {metric} {result.report.test_metrics[metric]:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg, params = _load_ckpt(args.checkpoint)
    dataset = _load_data(args.data)
    _check_compat(cfg, dataset)
    if not dataset.split_indices(args.split):
        raise RuntimeFailure(f"split {args.split!r} is empty in this dataset")
    metrics = evaluate(cfg, params, dataset, args.split)
    _echo_resolved(args, ["checkpoint", "data", "split", "seed"], None)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out_dir:
        out = viz.ensure_dir(args.out_dir)
        (out / f"eval_{args.split}.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def _network_for_dump(args, dataset: Dataset) -> Network:
    if args.checkpoint:
        cfg, params = _load_ckpt(args.checkpoint)
        _check_compat(cfg, dataset)
    else:
        num_classes = (dataset.num_parts() if args.head == "segmentation"
                       else len(dataset.config.kinds))
        cfg = _net_config_from_args(args, num_classes)
        params = init_params(cfg, seed=args.seed)
    return Network(cfg, params)


def _dump_shape(args, dataset: Dataset) -> PointCloud:
    if not 0 <= args.index < len(dataset):
        raise RuntimeFailure(f"--index {args.index} outside dataset of {len(dataset)} shapes")
    return dataset.shapes[args.index]


def cmd_transform_dump(args) -> int:
    dataset = _load_data(args.data)
    net = _network_for_dump(args, dataset)
    cloud = _dump_shape(args, dataset)
    out = viz.ensure_dir(args.out_dir)
    _echo_resolved(args, ["checkpoint", "data", "index", "seed", "out_dir"], out)
    write_cloud(out / "input.txt", cloud)
    figures = [("input", cloud.points, cloud.part_labels)]
    for name, family, coords, _graph in net.transformed_clouds(cloud):
        dumped = PointCloud(coords.T, part_labels=cloud.part_labels, category=cloud.category)
        write_cloud(out / f"{name}.{family}.txt", dumped)
        figures.append((f"{name} ({family})", dumped.points, dumped.part_labels))
    if not args.no_figures:
        viz.save_cloud_grid(out / "transforms.png", figures,
                            title=f"shape {args.index}: learned sub-graph geometries")
    print(f"wrote {len(figures) - 1} transformed clouds to {out}")
    return 0


def cmd_knn_dump(args) -> int:
    dataset = _load_data(args.data)
    net = _network_for_dump(args, dataset)
    cloud = _dump_shape(args, dataset)
    out = viz.ensure_dir(args.out_dir)
    _echo_resolved(args, ["checkpoint", "data", "index", "seed", "out_dir"], out)
    count = 0
    for name, family, _coords, graph in net.transformed_clouds(cloud):
        (out / f"{name}.{family}.graph.txt").write_text(graph_to_text(graph))
        count += 1
    print(f"wrote {count} affinity graphs to {out}")
    return 0


def cmd_stats(args) -> int:
    two_file_mode = args.before is not None or args.after is not None
    if two_file_mode and (args.before is None or args.after is None):
        raise UsageError("stats needs both --before and --after (or neither)")
    if not two_file_mode and not (args.checkpoint and args.data):
        raise UsageError("stats needs either --before/--after files or --checkpoint/--data")

    out = viz.ensure_dir(args.out_dir) if args.out_dir else None

    if two_file_mode:
        try:
            before, _ = read_cloud(args.before)
            after, _ = read_cloud(args.after)
        except (OSError, CloudParseError) as exc:
            raise RuntimeFailure(str(exc)) from exc
        stats = neighborhood_std_stats(before, after, args.k)
        t, dof = welch_t_test(per_point_neighbor_std(before, args.k),
                              per_point_neighbor_std(after, args.k))
        result = {
            "mode": "two-file",
            "k": args.k,
            "std_before": stats.std_before,
            "std_after": stats.std_after,
            "reduction_percent": 100.0 * stats.reduction,
            "whole_cloud_std_before": stats.whole_cloud_std_before,
            "whole_cloud_std_after": stats.whole_cloud_std_after,
            "t_score": t,
            "dof": dof,
        }
        before_vals = per_point_neighbor_std(before, args.k)
        after_vals = per_point_neighbor_std(after, args.k)
    else:
        cfg, params = _load_ckpt(args.checkpoint)
        dataset = _load_data(args.data)
        _check_compat(cfg, dataset)
        net = Network(cfg, params)
        indices = dataset.split_indices(args.split)[: args.max_shapes]
        if not indices:
            raise RuntimeFailure(f"split {args.split!r} is empty in this dataset")
        before_all: list[np.ndarray] = []
        after_by_tr: dict[str, list[np.ndarray]] = {}
        for i in indices:
            cloud = dataset.shapes[i]
            before_all.append(per_point_neighbor_std(cloud, args.k))
            for name, family, coords, _graph in net.transformed_clouds(cloud):
                after_by_tr.setdefault(f"{name}.{family}", []).append(
                    per_point_neighbor_std(coords.T, args.k))
        before_vals = np.concatenate(before_all)
        per_transformer = {}
        pooled_after = []
        for name, chunks in sorted(after_by_tr.items()):
            after_vals_tr = np.concatenate(chunks)
            pooled_after.append(after_vals_tr)
            t, dof = welch_t_test(before_vals, after_vals_tr)
            per_transformer[name] = {
                "std_before": float(before_vals.mean()),
                "std_after": float(after_vals_tr.mean()),
                "reduction_percent": 100.0 * (before_vals.mean() - after_vals_tr.mean())
                                      / before_vals.mean(),
                "t_score": t,
                "dof": dof,
            }
        after_vals = np.concatenate(pooled_after)
        t, dof = welch_t_test(before_vals, after_vals)
        result = {
            "mode": "model",
            "k": args.k,
            "split": args.split,
            "n_shapes": len(indices),
            "std_before": float(before_vals.mean()),
            "std_after": float(after_vals.mean()),
            "reduction_percent": 100.0 * float(before_vals.mean() - after_vals.mean())
                                  / float(before_vals.mean()),
            "t_score": t,
            "dof": dof,
            "per_transformer": per_transformer,
        }

    _echo_resolved(args, ["before", "after", "checkpoint", "data", "split", "k", "seed"], out)
    print(json.dumps(result, indent=2, sort_keys=True))
    if out is not None:
        (out / "stats.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        if not args.no_figures:
            viz.save_std_histogram(out / "stats.png", before_vals, after_vals,
                                   title=f"reduction {result['reduction_percent']:.1f}%")
    return 0


def gradcheck_audit(seed: int, samples: int, n_points: int) -> dict:
    """Finite-difference audit of a 2-block net with one transformer per family."""
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(
        blocks=[BlockConfig([TransformerSpec("affine", 4, (6,)),
                             TransformerSpec("projective", 4, (6,))], k_nn=4),
                BlockConfig([TransformerSpec("deformable", 4, (6,)),
                             TransformerSpec("fixed", 4, (6,))], k_nn=4)],
        num_classes=3, head_widths=(8,), seed=seed)
    params = init_params(cfg, seed=seed)
    net = Network(cfg, params)
    cloud = PointCloud(rng.normal(size=(n_points, 3)),
                       part_labels=rng.integers(0, 3, n_points))

    def loss_fn():
        return softmax_cross_entropy(net.seg_logits(cloud), cloud.part_labels)

    loss = loss_fn()
    backward(loss)

    matrix_names = [n for n in params if n.endswith(".matrix")]
    entries: list[tuple[str, int]] = []
    for name in matrix_names:  # audit every transform-matrix entry
        entries.extend((name, i) for i in range(params[name].data.size))
    other = [n for n in params if not n.endswith(".matrix")]
    while len(entries) < samples:
        name = other[int(rng.integers(0, len(other)))]
        entries.append((name, int(rng.integers(0, params[name].data.size))))

    worst, per_matrix = 0.0, {}
    for name, flat_index in entries:
        tensor = params[name]
        numeric = finite_diff(lambda: float(loss_fn().data), tensor, flat_index)
        analytic = tensor.grad.flat[flat_index] if tensor.grad is not None else 0.0
        err = relative_error(float(analytic), numeric)
        worst = max(worst, err)
        per_matrix[name] = max(per_matrix.get(name, 0.0), err)
    return {"max_relative_error": worst, "n_checked": len(entries),
            "per_parameter_max": per_matrix, "tolerance": GRADCHECK_TOLERANCE,
            "passed": worst < GRADCHECK_TOLERANCE}


def cmd_gradcheck(args) -> int:
    if args.samples < 50:
        raise UsageError("--samples must be >= 50 for a meaningful audit")
    result = gradcheck_audit(args.seed, args.samples, args.points)
    _echo_resolved(args, ["samples", "points", "seed"], None)
    print(f"checked {result['n_checked']} parameter entries; "
          f"max relative error {result['max_relative_error']:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    if args.out_dir:
        out = viz.ensure_dir(args.out_dir)
        (out / "gradcheck.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if not result["passed"]:
        print("gradient audit FAILED", file=sys.stderr)
        return 2
    print("gradient audit passed")
    return 0


def cmd_ablate(args) -> int:
    dataset = _load_data(args.data)
    num_classes = dataset.num_parts() if args.head == "segmentation" else len(dataset.config.kinds)
    base_cfg = _net_config_from_args(args, num_classes)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                            seed=args.seed, freeze_transforms=args.freeze_transforms)
    out = viz.ensure_dir(Path(args.out_dir) / f"ablate-{args.mode}-"
                         f"{run_dir_name(base_cfg, train_cfg, dataset.config.to_dict())[4:]}")
    _echo_resolved(args, ["data", "mode", "family", "blocks", "graphs", "feature_width",
                          "hidden", "k_nn", "epochs", "batch", "lr", "seed", "out_dir"], out)
    metric = "miou" if args.head == "segmentation" else "accuracy"
    if args.mode == "graphs":
        rows = ablation_graphs(dataset, base_cfg, train_cfg)
        csv_path = out / "ablation_graphs.csv"
    else:
        rows = ablation_layers(dataset, base_cfg, train_cfg)
        csv_path = out / "ablation_layers.csv"
    rows_to_csv(rows, csv_path)
    if not args.no_figures:
        viz.save_ablation_chart(csv_path.with_suffix(".png"), rows, metric)
    for row in rows:
        print("  ".join(f"{k}={v}" for k, v in row.items()))
    print(f"wrote {csv_path}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "transform-dump": cmd_transform_dump,
    "knn-dump": cmd_knn_dump,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        argv = _apply_config_defaults(parser, list(argv))
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and friends
            return 0 if exc.code in (0, None) else 1
        if args.command is None:
            parser.print_help()
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
