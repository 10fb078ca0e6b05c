"""Batch command-line frontend: prepare splits, train, evaluate and run the
ablation grid. Every run directory receives a manifest that fully
determines the run; re-executing from the manifest reproduces checkpoints
and logs bit-exactly.

Subcommands: split, train, eval, ablate. The default data directory comes
from $STARGCN_DATA_DIR (falling back to ./data).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import (
    DATASET_PRESET_NAMES,
    DatasetDescriptor,
    build_ml100k_item_features,
    build_ml100k_user_features,
    dataset_preset,
    load_features,
    load_ml100k_fold,
    load_ratings,
    normalize_features,
)
from .errors import NonFiniteLossError, SpecMismatchError, StarGcnError
from .evaluation import (
    INDUCTIVE_ITEMS,
    INDUCTIVE_USERS,
    TRANSDUCTIVE,
    SplitPlan,
    evaluate_inductive,
    evaluate_pairs,
    load_plan,
    make_inductive_split,
    make_transductive_split,
    save_plan,
)
from .graph import ITEM, USER, RatingLevels, subgraph_from_edges
from .model import ModelSpec, init_parameters
from .reporting import (
    format_table,
    save_grouped_bars,
    save_rmse_bars,
    save_training_curves,
    write_csv,
    write_ndjson,
    write_table,
)
from .tape import RngStream
from .training import TrainConfig, run_training

MANIFEST_FORMAT = 1
INIT_STREAM_SALT = 101  # parameter init draws from a stream separate from batching

# model variants of the ablation grid; display labels follow the
# block/layer naming convention (minus-rec = no reconstruction decoder,
# minus-rm = train without removing sampled edges)
MODEL_VARIANTS = {
    "1b2l-norec-noremove": {
        "label": "1b2l (-rec., -rm.)",
        "spec": dict(num_blocks=1, layers_per_block=2, combine="stacked",
                     reconstruction=False),
        "remove_sampled_edges": False,
    },
    "1b2l-norec": {
        "label": "1b2l (-rec.)",
        "spec": dict(num_blocks=1, layers_per_block=2, combine="stacked",
                     reconstruction=False),
        "remove_sampled_edges": True,
    },
    "1b2l": {
        "label": "1b2l",
        "spec": dict(num_blocks=1, layers_per_block=2, combine="stacked",
                     reconstruction=True),
        "remove_sampled_edges": True,
    },
    "2b1l-recurrent": {
        "label": "2b1l (recurrent)",
        "spec": dict(num_blocks=2, layers_per_block=1, combine="recurrent",
                     reconstruction=True),
        "remove_sampled_edges": True,
    },
    "2b1l": {
        "label": "2b1l",
        "spec": dict(num_blocks=2, layers_per_block=1, combine="stacked",
                     reconstruction=True),
        "remove_sampled_edges": True,
    },
}
ABLATION_ORDER = ["1b2l-norec-noremove", "1b2l-norec", "1b2l", "2b1l-recurrent", "2b1l"]

# hyperparameter sets: one for the small benchmarks, one for the large ones
SCALE_PRESETS = {
    "small": dict(embed_dim=32, feature_dim=8, agg_hidden_dim=250, encoder_out_dim=75,
                  rating_proj_dim=64, dropout_rate=0.5, batch_size=10_000),
    "large": dict(embed_dim=64, feature_dim=32, agg_hidden_dim=250, encoder_out_dim=75,
                  rating_proj_dim=64, dropout_rate=0.3, batch_size=100_000),
}
LARGE_DATASETS = {"ml-1m", "ml-10m"}


def default_data_dir() -> str:
    return os.environ.get("STARGCN_DATA_DIR", "data")


def _parse_levels(text: str) -> RatingLevels:
    lo, hi, step = (float(x) for x in text.split(":"))
    return RatingLevels.from_range(lo, hi, step)


def add_dataset_args(parser):
    parser.add_argument("--dataset", choices=DATASET_PRESET_NAMES,
                        help="named dataset preset")
    parser.add_argument("--ratings-file", help="custom delimited rating file")
    parser.add_argument("--delimiter", default="\t",
                        help="field delimiter for --ratings-file (default tab)")
    parser.add_argument("--rating-scale", default="1:5:1",
                        help="lo:hi:step rating scale for --ratings-file")
    parser.add_argument("--data-dir", default=default_data_dir(),
                        help="dataset root (default $STARGCN_DATA_DIR or ./data)")


def resolve_descriptor(args) -> DatasetDescriptor:
    if args.dataset:
        return dataset_preset(args.dataset, args.data_dir)
    if args.ratings_file:
        return DatasetDescriptor(
            name="custom",
            rating_path=args.ratings_file,
            delimiter=args.delimiter,
            levels=_parse_levels(args.rating_scale),
        )
    raise StarGcnError("either --dataset or --ratings-file is required")


def descriptor_to_dict(d: DatasetDescriptor) -> dict:
    return {
        "name": d.name,
        "rating_path": str(d.rating_path),
        "delimiter": d.delimiter,
        "levels": list(d.levels.values),
        "expected_users": d.expected_users,
        "expected_items": d.expected_items,
        "expected_ratings": d.expected_ratings,
        "user_feature_path": str(d.user_feature_path) if d.user_feature_path else None,
        "item_feature_path": str(d.item_feature_path) if d.item_feature_path else None,
    }


def descriptor_from_dict(d: dict) -> DatasetDescriptor:
    return DatasetDescriptor(
        name=d["name"],
        rating_path=d["rating_path"],
        delimiter=d["delimiter"],
        levels=RatingLevels(d["levels"]),
        expected_users=d["expected_users"],
        expected_items=d["expected_items"],
        expected_ratings=d["expected_ratings"],
        user_feature_path=d["user_feature_path"],
        item_feature_path=d["item_feature_path"],
    )


def parse_seeds(args) -> list:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",")]
    return [int(getattr(args, "seed", 0))]


# ---------------------------------------------------------------- cmd split

def cmd_split(args) -> int:
    descriptor = resolve_descriptor(args)
    loaded = load_ratings(descriptor)
    graph = loaded.build_graph()
    if args.protocol == TRANSDUCTIVE:
        if args.fold is not None:
            if descriptor.name != "ml-100k":
                raise StarGcnError("--fold applies to the ml-100k preset only")
            base, test = load_ml100k_fold(args.data_dir, args.fold, loaded)
            rng = RngStream(args.seed)
            perm = rng.permutation(base.size)
            n_valid = int(round(base.size * args.valid_fraction))
            plan = SplitPlan(
                kind=TRANSDUCTIVE, seed=args.seed,
                train_edges=base[perm[n_valid:]],
                valid_edges=base[perm[:n_valid]],
                test_edges=test,
                metadata={"fold": args.fold, "valid_fraction": args.valid_fraction},
            )
        else:
            plan = make_transductive_split(graph, args.test_fraction,
                                           args.valid_fraction, args.seed)
    else:
        kind = USER if args.protocol == INDUCTIVE_USERS else ITEM
        plan = make_inductive_split(graph, kind, args.hold, args.reveal, args.seed,
                                    valid_fraction=args.valid_fraction)
    save_plan(args.out, plan)
    print(f"wrote {args.out}")
    rows = [
        ("train", plan.train_edges.size),
        ("valid", plan.valid_edges.size),
        ("test", plan.test_edges.size),
        ("revealed", plan.revealed_edges.size),
        ("held-out nodes", plan.held_out_nodes.size),
    ]
    print(format_table(("partition", "count"), rows), end="")
    return 0


# ---------------------------------------------------------------- cmd train

def build_model_spec(variant: str, scale: str, num_levels: int,
                     with_features: bool, overrides: dict | None = None) -> ModelSpec:
    preset = dict(SCALE_PRESETS[scale])
    preset.pop("batch_size")
    if not with_features:
        preset["feature_dim"] = 0
    fields = dict(MODEL_VARIANTS[variant]["spec"])
    fields.update(preset)
    fields["num_levels"] = num_levels
    fields.update(overrides or {})
    return ModelSpec(**fields)


def build_train_config(manifest: dict, seed: int) -> TrainConfig:
    cfg = dict(manifest["train_config"])
    cfg["seed"] = seed
    return TrainConfig(**cfg)


def load_feature_matrices(manifest, descriptor, loaded, plan):
    """Raw + normalized feature matrices for both sides, or Nones when the
    run is embedding-only. Normalization statistics exclude held-out nodes
    of the inductive side."""
    if not manifest["features"]:
        return None, None
    data_dir = manifest["data_dir"]
    user_fm = item_fm = None
    if descriptor.user_feature_path:
        user_fm = load_features(descriptor.user_feature_path, loaded.user_ids,
                                loaded.num_users)
    elif descriptor.name == "ml-100k":
        user_fm = build_ml100k_user_features(data_dir, loaded.user_ids)
    if descriptor.item_feature_path:
        item_fm = load_features(descriptor.item_feature_path, loaded.item_ids,
                                loaded.num_items)
    elif descriptor.name == "ml-100k":
        item_fm = build_ml100k_item_features(data_dir, loaded.item_ids)
    if user_fm is None and item_fm is None:
        raise StarGcnError(
            f"--features requested but no feature source exists for "
            f"{descriptor.name!r}; supply --user-features/--item-features files"
        )

    def train_rows(side, count):
        if plan.node_kind == side and plan.held_out_nodes.size:
            return np.setdiff1d(np.arange(count), plan.held_out_nodes)
        return None

    dtype = np.dtype(manifest["precision_dtype"])
    user = item = None
    if user_fm is not None:
        user = normalize_features(user_fm, "zscore",
                                  train_rows(USER, loaded.num_users)).values.astype(dtype)
    if item_fm is not None:
        item = normalize_features(item_fm, "zscore",
                                  train_rows(ITEM, loaded.num_items)).values.astype(dtype)
    return user, item


def train_manifest_from_args(args) -> dict:
    descriptor = resolve_descriptor(args)
    scale = args.scale or ("large" if descriptor.name in LARGE_DATASETS else "small")
    batch_size = args.batch_size or (
        500_000 if descriptor.name == "ml-10m" else SCALE_PRESETS[scale]["batch_size"]
    )
    plan = load_plan(args.plan)
    spec_overrides = {}
    if args.recon_weight is not None:
        blocks = MODEL_VARIANTS[args.variant]["spec"]["num_blocks"]
        spec_overrides["recon_weights"] = [args.recon_weight] * blocks
    spec = build_model_spec(args.variant, scale, descriptor.levels.num_levels,
                            args.features, spec_overrides)
    masking = TrainConfig.transductive() if plan.kind == TRANSDUCTIVE \
        else TrainConfig.inductive()
    config = masking.with_overrides(
        batch_size=batch_size,
        max_iterations=args.max_iterations,
        validation_every=args.validation_every,
        remove_sampled_edges=MODEL_VARIANTS[args.variant]["remove_sampled_edges"],
        initial_lr=args.initial_lr,
    )
    return {
        "format": MANIFEST_FORMAT,
        "command": "train",
        "dataset": descriptor_to_dict(descriptor),
        "data_dir": args.data_dir,
        "plan_path": str(args.plan),
        "variant": args.variant,
        "model_spec": spec.to_dict(),
        "train_config": {k: v for k, v in dataclasses.asdict(config).items()},
        "seeds": parse_seeds(args),
        "features": args.features,
        "precision_dtype": "float32" if args.precision == "f32" else "float64",
        "deterministic": bool(args.deterministic),
        "out_dir": str(args.out),
    }


def execute_train(manifest: dict, out_dir: Path) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    descriptor = descriptor_from_dict(manifest["dataset"])
    loaded = load_ratings(descriptor)
    graph = loaded.build_graph()
    plan = load_plan(manifest["plan_path"])
    spec = ModelSpec.from_dict(manifest["model_spec"])
    dtype = np.dtype(manifest["precision_dtype"])
    user_feats, item_feats = load_feature_matrices(manifest, descriptor, loaded, plan)
    train_graph, _ = subgraph_from_edges(graph, plan.train_edges)
    valid_set = None
    if plan.valid_edges.size:
        valid_set = (graph.edge_users[plan.valid_edges],
                     graph.edge_items[plan.valid_edges],
                     graph.edge_ratings[plan.valid_edges])
    summary_rows = []
    for seed in manifest["seeds"]:
        config = build_train_config(manifest, seed)
        params = init_parameters(
            spec, RngStream(seed).spawn(INIT_STREAM_SALT),
            graph.num_users, graph.num_items,
            user_raw_dim=user_feats.shape[1] if user_feats is not None else 0,
            item_raw_dim=item_feats.shape[1] if item_feats is not None else 0,
            dtype=dtype,
        )
        best, log = run_training(params, spec, train_graph, valid_set, config,
                                 user_features=user_feats, item_features=item_feats)
        ckpt_path = out_dir / f"checkpoint-seed{seed}.ckpt"
        # the run is a pure function of (seed, iterations); that pair is the
        # whole random-stream lineage of the stored parameters
        save_checkpoint(ckpt_path, best, {"seed": seed, "iterations": len(log)})
        write_ndjson(out_dir / f"log-seed{seed}.ndjson", log)
        save_training_curves(log, out_dir / f"curves-seed{seed}.png",
                             title=f"{manifest['variant']} seed {seed}")
        valid_scores = [r["valid_rmse"] for r in log if r["valid_rmse"] is not None]
        best_valid = min(valid_scores) if valid_scores else float("nan")
        summary_rows.append((seed, len(log), f"{best_valid:.6f}"))
        print(f"seed {seed}: {len(log)} iterations, best validation RMSE {best_valid:.6f}")
    write_csv(out_dir / "training-summary.csv",
              ("seed", "iterations", "best_valid_rmse"), summary_rows)
    write_table(out_dir / "training-summary.txt",
                ("seed", "iterations", "best_valid_rmse"), summary_rows)
    return 0


def cmd_train(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        if manifest.get("format") != MANIFEST_FORMAT:
            raise StarGcnError(f"unsupported manifest format in {args.manifest}")
        out_dir = Path(args.out) if args.out else Path(manifest["out_dir"])
        return execute_train(manifest, out_dir)
    if not args.out:
        raise StarGcnError("--out is required")
    if not args.plan:
        raise StarGcnError("--plan is required (create one with the split command)")
    manifest = train_manifest_from_args(args)
    return execute_train(manifest, Path(args.out))


# ----------------------------------------------------------------- cmd eval

def _score_checkpoint(ckpt_path, graph, plan, user_feats, item_feats):
    store, _ = load_checkpoint(ckpt_path)
    if store.num_users != graph.num_users or store.num_items != graph.num_items:
        raise SpecMismatchError(
            f"{ckpt_path}: checkpoint is for {store.num_users}x{store.num_items} "
            f"nodes, dataset has {graph.num_users}x{graph.num_items}"
        )
    raw_u, raw_i = store.feature_raw_dims()
    if raw_u and (user_feats is None or user_feats.shape[1] != raw_u):
        raise SpecMismatchError(
            f"{ckpt_path}: checkpoint expects {raw_u}-dim user features"
        )
    if raw_i and (item_feats is None or item_feats.shape[1] != raw_i):
        raise SpecMismatchError(
            f"{ckpt_path}: checkpoint expects {raw_i}-dim item features"
        )
    kwargs = dict(user_features=user_feats, item_features=item_feats)
    if plan.kind == TRANSDUCTIVE:
        support, _ = subgraph_from_edges(graph, plan.train_edges)
        return evaluate_pairs(
            store, store.spec, support,
            graph.edge_users[plan.test_edges], graph.edge_items[plan.test_edges],
            graph.edge_ratings[plan.test_edges], **kwargs,
        )
    return evaluate_inductive(store, store.spec, plan, graph, **kwargs)


def collect_checkpoints(args) -> list:
    paths = []
    if args.run_dir:
        paths.extend(sorted(Path(args.run_dir).glob("checkpoint-*.ckpt")))
    if args.checkpoint:
        paths.extend(Path(p) for p in args.checkpoint)
    if not paths:
        raise StarGcnError("no checkpoints given; use --checkpoint or --run-dir")
    return paths


def cmd_eval(args) -> int:
    descriptor = resolve_descriptor(args)
    loaded = load_ratings(descriptor)
    graph = loaded.build_graph()
    plan = load_plan(args.plan)
    paths = collect_checkpoints(args)
    # feature needs follow the first checkpoint's expectations
    probe, _ = load_checkpoint(paths[0])
    raw_u, raw_i = probe.feature_raw_dims()
    manifest_like = {
        "features": bool(raw_u or raw_i),
        "data_dir": args.data_dir,
        "precision_dtype": probe.dtype.name,
    }
    user_feats, item_feats = load_feature_matrices(manifest_like, descriptor, loaded, plan)
    scores = []
    for path in paths:
        score = _score_checkpoint(path, graph, plan, user_feats, item_feats)
        scores.append(score)
        print(f"{path.name}: test RMSE {score:.6f}")
    mean = float(np.mean(scores))
    std = float(np.std(scores))
    print(f"mean {mean:.6f}  stddev {std:.6f}  ({len(scores)} checkpoints)")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [(p.name, f"{s:.6f}") for p, s in zip(paths, scores)]
        rows.append(("mean", f"{mean:.6f}"))
        rows.append(("stddev", f"{std:.6f}"))
        write_csv(out_dir / "eval.csv", ("checkpoint", "test_rmse"), rows)
        write_table(out_dir / "eval.txt", ("checkpoint", "test_rmse"), rows)
        record = {
            "plan": str(args.plan),
            "kind": plan.kind,
            "scores": [float(s) for s in scores],
            "mean": mean,
            "stddev": std,
        }
        (out_dir / "eval.json").write_text(
            json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        save_rmse_bars([p.stem for p in paths], scores, out_dir / "eval.png",
                       title=f"test RMSE ({plan.kind})")
    return 0


# --------------------------------------------------------------- cmd ablate

def cmd_ablate(args) -> int:
    variants = args.variants.split(",") if args.variants else list(ABLATION_ORDER)
    for v in variants:
        if v not in MODEL_VARIANTS:
            raise StarGcnError(f"unknown variant {v!r}; choose from {list(MODEL_VARIANTS)}")
    modes = args.feature_modes.split(",") if args.feature_modes else ["emb"]
    for m in modes:
        if m not in ("emb", "fea"):
            raise StarGcnError("feature modes are 'emb' and 'fea'")
    seeds = parse_seeds(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    descriptor = resolve_descriptor(args)
    loaded = load_ratings(descriptor)
    graph = loaded.build_graph()
    plan = load_plan(args.plan)
    grid_manifest = {
        "format": MANIFEST_FORMAT,
        "command": "ablate",
        "dataset": descriptor_to_dict(descriptor),
        "data_dir": args.data_dir,
        "plan_path": str(args.plan),
        "variants": variants,
        "feature_modes": modes,
        "seeds": seeds,
        "max_iterations": args.max_iterations,
        "batch_size": args.batch_size,
        "validation_every": args.validation_every,
        "initial_lr": args.initial_lr,
        "recon_weight": args.recon_weight,
        "precision": args.precision,
        "out_dir": str(out_dir),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(grid_manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    results = {}
    for mode in modes:
        for variant in variants:
            per_seed = []
            for seed in seeds:
                run_dir = out_dir / f"{variant}-{mode}-seed{seed}"
                ns = argparse.Namespace(**vars(args))
                ns.variant = variant
                ns.features = mode == "fea"
                ns.seeds = str(seed)
                ns.out = str(run_dir)
                manifest = train_manifest_from_args(ns)
                execute_train(manifest, run_dir)
                user_feats, item_feats = load_feature_matrices(
                    manifest, descriptor, loaded, plan)
                score = _score_checkpoint(
                    run_dir / f"checkpoint-seed{seed}.ckpt", graph, plan,
                    user_feats, item_feats)
                per_seed.append(score)
                print(f"{variant} [{mode}] seed {seed}: test RMSE {score:.6f}")
            results[(variant, mode)] = per_seed

    header = ["model"] + [
        {"emb": "emb-only RMSE", "fea": "with-features RMSE"}[m] for m in modes
    ]
    rows = []
    csv_rows = []
    for variant in variants:
        label = MODEL_VARIANTS[variant]["label"]
        cells = [label]
        csv_cells = [variant]
        for mode in modes:
            vals = results[(variant, mode)]
            cells.append(f"{np.mean(vals):.4f} ± {np.std(vals):.4f}")
            csv_cells.extend([f"{np.mean(vals):.6f}", f"{np.std(vals):.6f}"])
        rows.append(cells)
        csv_rows.append(csv_cells)
    csv_header = ["variant"]
    for mode in modes:
        csv_header.extend([f"{mode}_mean", f"{mode}_std"])
    text = write_table(out_dir / "ablation.txt", header, rows)
    write_csv(out_dir / "ablation.csv", csv_header, csv_rows)
    series = {m: [float(np.mean(results[(v, m)])) for v in variants] for m in modes}
    save_grouped_bars([MODEL_VARIANTS[v]["label"] for v in variants], series,
                      out_dir / "ablation.png", title=f"ablation on {descriptor.name}")
    print(text, end="")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stargcn",
        description="Graph-convolutional matrix completion with masked-embedding "
                    "reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_split = sub.add_parser("split", help="create a train/valid/test plan file")
    add_dataset_args(p_split)
    p_split.add_argument("--protocol", default=TRANSDUCTIVE,
                         choices=[TRANSDUCTIVE, INDUCTIVE_USERS, INDUCTIVE_ITEMS])
    p_split.add_argument("--fold", type=int, help="use a provided ml-100k fold (1..5)")
    p_split.add_argument("--test-fraction", type=float, default=0.1)
    p_split.add_argument("--valid-fraction", type=float, default=0.05)
    p_split.add_argument("--hold", type=float, default=0.2,
                         help="fraction of nodes held out (inductive)")
    p_split.add_argument("--reveal", type=float, default=0.5,
                         help="fraction of held-out nodes' edges revealed at inference")
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", required=True)
    p_split.set_defaults(fn=cmd_split)

    p_train = sub.add_parser("train", help="train one or more seeds from a plan")
    add_dataset_args(p_train)
    p_train.add_argument("--plan")
    p_train.add_argument("--variant", default="2b1l", choices=list(MODEL_VARIANTS))
    p_train.add_argument("--scale", choices=list(SCALE_PRESETS),
                         help="hyperparameter set (default: by dataset)")
    p_train.add_argument("--features", action="store_true",
                         help="use node features next to the embeddings")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--seeds", help="comma-separated seed list")
    p_train.add_argument("--max-iterations", type=int, default=20_000)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--validation-every", type=int, default=10)
    p_train.add_argument("--initial-lr", type=float, default=0.002)
    p_train.add_argument("--recon-weight", type=float,
                         help="reconstruction loss weight per block (default 0.1)")
    p_train.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p_train.add_argument("--deterministic", action="store_true", default=True,
                         help="runs are always deterministic; flag kept for manifests")
    p_train.add_argument("--manifest", help="re-execute a run from its manifest")
    p_train.add_argument("--out")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="score checkpoints on a plan's test edges")
    add_dataset_args(p_eval)
    p_eval.add_argument("--plan", required=True)
    p_eval.add_argument("--checkpoint", action="append",
                        help="checkpoint file (repeatable)")
    p_eval.add_argument("--run-dir", help="directory with checkpoint-*.ckpt files")
    p_eval.add_argument("--out", help="directory for eval reports and figures")
    p_eval.set_defaults(fn=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run the model-variant grid")
    add_dataset_args(p_ablate)
    p_ablate.add_argument("--plan", required=True)
    p_ablate.add_argument("--variants", help=f"subset of {list(MODEL_VARIANTS)}")
    p_ablate.add_argument("--feature-modes", default="emb",
                          help="comma-separated subset of emb,fea")
    p_ablate.add_argument("--seed", type=int, default=0)
    p_ablate.add_argument("--seeds", help="comma-separated seed list")
    p_ablate.add_argument("--scale", choices=list(SCALE_PRESETS))
    p_ablate.add_argument("--max-iterations", type=int, default=20_000)
    p_ablate.add_argument("--batch-size", type=int)
    p_ablate.add_argument("--validation-every", type=int, default=10)
    p_ablate.add_argument("--initial-lr", type=float, default=0.002)
    p_ablate.add_argument("--recon-weight", type=float)
    p_ablate.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p_ablate.add_argument("--deterministic", action="store_true", default=True)
    p_ablate.add_argument("--out", required=True)
    p_ablate.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        details = getattr(e, "details", None)
        if details is not None:
            dump = Path("nonfinite-batch.json")
            dump.write_text(json.dumps(details, indent=2) + "\n", encoding="utf-8")
            print(f"offending batch dumped to {dump}", file=sys.stderr)
        return 2
    except StarGcnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
