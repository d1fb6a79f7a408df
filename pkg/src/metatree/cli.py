"""Command-line entry points for training, evaluation, ablation, studies, and
per-user tree explanations.

Every run writes a `manifest.json` beside its outputs recording the effective
options, the seed, and content hashes of the input files, so any command can
be reproduced byte-for-byte. Option precedence: defaults < config file <
METATREE_* environment variables < command-line flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data as data_mod
from . import evaluation, synthetic
from .networks import MetaModel, ModelConfig
from .training import VARIANTS, TrainConfig, train
from .tree import explain, sparsify, tree_to_dot, tree_to_json, tree_to_text, grow_tree

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4

ENV_PREFIX = "METATREE_"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, options, input_paths, outputs):
    manifest = {
        "command": command,
        "options": {k: v for k, v in sorted(options.items())},
        "inputs": {str(p): _sha256(p) for p in input_paths if os.path.isfile(p)},
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return path


def _merge_options(args, keys):
    """defaults < config file < env < flags, for the given option keys."""
    merged = {}
    config = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = json.load(fh)
        unknown = set(config) - set(keys)
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
    for key in keys:
        flag_value = getattr(args, key, None)
        env_value = os.environ.get(ENV_PREFIX + key.upper())
        if flag_value is not None:
            merged[key] = flag_value
        elif env_value is not None:
            merged[key] = type(keys[key])(env_value) if keys[key] is not None else env_value
        elif key in config:
            merged[key] = config[key]
        else:
            merged[key] = keys[key]
    return merged


def _bool(text):
    if isinstance(text, bool):
        return text
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def _add_model_flags(p):
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--dh", type=int, default=None, dest="d_h")
    p.add_argument("--lambda", type=float, default=None, dest="sparsity_weight")
    p.add_argument("--dynamic", type=_bool, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None, dest="learning_rate")
    p.add_argument("--variant", choices=VARIANTS, default=None)


MODEL_KEYS = {"depth": 3, "d_h": 512, "sparsity_weight": 0.1, "dynamic": False,
              "epochs": 200, "batch_size": 32, "learning_rate": 3e-4,
              "variant": "none", "seed": 0, "workers": 1, "patience": 10,
              "split_fraction": 0.8, "val_fraction": 0.1}


def _train_config(opts, loss_kind):
    return TrainConfig(
        sparsity_weight=opts["sparsity_weight"], learning_rate=opts["learning_rate"],
        batch_size=opts["batch_size"], epochs=opts["epochs"],
        split_fraction=opts["split_fraction"], loss_kind=loss_kind,
        variant=opts["variant"], seed=opts["seed"], patience=opts["patience"],
        val_fraction=opts["val_fraction"])


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_dataset(args):
    if not args.data_dir:
        raise FileNotFoundError("missing --data-dir")
    return data_mod.load_movielens_100k(args.data_dir)


def _dataset_inputs(args):
    return [os.path.join(args.data_dir, f) for f in ("u1.base", "u1.test", "u.item")]


# -- subcommands -----------------------------------------------------------------


def _int_tuple(value, name, length):
    if value in (None, ""):
        return None
    if isinstance(value, (tuple, list)):
        parts = list(value)
    else:
        parts = str(value).split(",")
    if len(parts) != length:
        raise ValueError(f"{name} expects {length} comma-separated integers")
    return tuple(int(p) for p in parts)


def cmd_train_synthetic(args):
    opts = _merge_options(args, dict(MODEL_KEYS, depth=2, tasks=50000,
                                     n_loss=20, batch_size=256,
                                     aux_schedule=None, aux_weight=10.0,
                                     build_sizes=None))
    out = _out_dir(args)
    config = ModelConfig(d_x=10, d_h=opts["d_h"], max_depth=opts["depth"],
                         dynamic=opts["dynamic"], sparsity_weight=opts["sparsity_weight"],
                         output_range=(0.0, 1.0))
    model = MetaModel(config, np.random.default_rng(opts["seed"]))
    cfg = _train_config(opts, "logistic")
    log_path = os.path.join(out, "train_log.csv")
    synthetic.episodic_train(model, cfg, opts["tasks"], n_loss=opts["n_loss"],
                             aux_schedule=_int_tuple(opts["aux_schedule"],
                                                     "aux-schedule", 3),
                             aux_weight=float(opts["aux_weight"]),
                             build_sizes=_int_tuple(opts["build_sizes"],
                                                    "build-sizes", 2),
                             log_path=log_path)
    ckpt = os.path.join(out, "model.npz")
    model.save(ckpt)
    write_manifest(out, "train-synthetic", opts, [], [ckpt, log_path])
    print(f"saved checkpoint: {ckpt}")
    return EXIT_OK


def cmd_train_rs(args):
    opts = _merge_options(args, dict(MODEL_KEYS))
    out = _out_dir(args)
    dataset = _load_dataset(args)
    config = ModelConfig(d_x=dataset.d_x, d_h=opts["d_h"], max_depth=opts["depth"],
                         dynamic=opts["dynamic"], sparsity_weight=opts["sparsity_weight"],
                         output_range=dataset.output_range)
    model = MetaModel(config, np.random.default_rng(opts["seed"]))
    cfg = _train_config(opts, "squared")
    log_path = os.path.join(out, "train_log.csv")
    users = [dataset.train_users[uid] for uid in sorted(dataset.train_users)]
    train(users, model, cfg, log_path=log_path)
    ckpt = os.path.join(out, "model.npz")
    model.save(ckpt)
    features = os.path.join(out, "feature_manifest.json")
    dataset.save_feature_manifest(features)
    write_manifest(out, "train-rs", opts, _dataset_inputs(args),
                   [ckpt, log_path, features])
    print(f"saved checkpoint: {ckpt}")
    return EXIT_OK


def cmd_evaluate(args):
    opts = _merge_options(args, dict(MODEL_KEYS))
    out = _out_dir(args)
    dataset = _load_dataset(args)
    model = MetaModel.load(args.checkpoint)
    report = evaluation.evaluate(model, dataset, routing=args.routing,
                                 sparsified=args.sparsified,
                                 variant=opts["variant"], workers=opts["workers"])
    summary = os.path.join(out, "evaluation.csv")
    with open(summary, "w") as fh:
        fh.write("routing,sparsified,rmse,mae,n_users,n_ratings,n_skipped_users\n")
        fh.write(f"{report.routing},{report.sparsified},{report.rmse:.6f},"
                 f"{report.mae:.6f},{report.n_users},{report.n_ratings},"
                 f"{report.n_skipped_users}\n")
    per_user = os.path.join(out, "evaluation_per_user.csv")
    with open(per_user, "w") as fh:
        fh.write("user_id,rmse,mae,n_ratings\n")
        for uid, rmse, mae, n in report.per_user:
            fh.write(f"{uid},{rmse:.6f},{mae:.6f},{n}\n")
    write_manifest(out, "evaluate", dict(opts, routing=args.routing,
                                         sparsified=args.sparsified,
                                         checkpoint=args.checkpoint),
                   _dataset_inputs(args) + [args.checkpoint], [summary, per_user])
    print(f"routing={report.routing} sparsified={report.sparsified} "
          f"rmse={report.rmse:.4f} mae={report.mae:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    opts = _merge_options(args, dict(MODEL_KEYS))
    out = _out_dir(args)
    dataset = _load_dataset(args)
    users = [dataset.train_users[uid] for uid in sorted(dataset.train_users)]
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = []
    results_path = os.path.join(out, "ablation.csv")
    for variant in variants:
        config = ModelConfig(d_x=dataset.d_x, d_h=opts["d_h"], max_depth=opts["depth"],
                             dynamic=opts["dynamic"],
                             sparsity_weight=opts["sparsity_weight"],
                             output_range=dataset.output_range)
        model = MetaModel(config, np.random.default_rng(opts["seed"]))
        cfg = _train_config(opts, "squared")
        cfg.variant = variant
        train(users, model, cfg)
        model.save(os.path.join(out, f"model_{variant}.npz"))
        soft = evaluation.evaluate(model, dataset, "soft", True, variant)
        hard = evaluation.evaluate(model, dataset, "hard", True, variant)
        rows.append({"variant": variant, "rmse_soft": soft.rmse,
                     "rmse_hard": hard.rmse, "mae_soft": soft.mae,
                     "mae_hard": hard.mae})
        logger.info("variant %s: soft=%.4f hard=%.4f", variant, soft.rmse, hard.rmse)
        evaluation._write_csv(results_path, rows)
    write_manifest(out, "ablate", dict(opts, variants=variants),
                   _dataset_inputs(args), [results_path])
    print(f"wrote {results_path}")
    return EXIT_OK


def cmd_explain(args):
    dataset = _load_dataset(args)
    model = MetaModel.load(args.checkpoint)
    uid = args.user
    if uid not in dataset.train_users:
        raise ValueError(f"user {uid} has no training ratings")
    user = dataset.train_users[uid]
    tree = grow_tree(model, user.X, user.y)
    if args.sparsified:
        tree = sparsify(tree)
    names = dataset.feature_names
    if args.format == "json":
        print(tree_to_json(tree, names))
    elif args.format == "dot":
        print(tree_to_dot(tree, names, dataset.denormalize))
    else:
        print(tree_to_text(tree, names, dataset.denormalize))
    if args.item is not None:
        rows = np.nonzero(user.item_ids == args.item)[0]
        if rows.size:
            x = user.X[rows[0]]
        elif args.item in getattr(dataset, "item_features", {}):
            x = dataset.item_features[args.item]
        else:
            found = None
            for other in dataset.test_users.values():
                hits = np.nonzero(other.item_ids == args.item)[0]
                if hits.size:
                    found = other.X[hits[0]]
                    break
            if found is None:
                raise ValueError(f"item {args.item} not found")
            x = found
        record = explain(tree, x, names, dataset.denormalize)
        print(json.dumps(record, indent=2))
    return EXIT_OK


def cmd_sweep(args):
    opts = _merge_options(args, dict(MODEL_KEYS, repeats=50))
    out = _out_dir(args)
    models = {}
    inputs = []
    for spec in args.model:
        name, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--model expects NAME=CHECKPOINT, got {spec!r}")
        inputs.append(path)
        meta = MetaModel.load(path)
        models[name] = _meta_sweep_adapter(meta)
    if args.cart_depth is not None:
        from .baselines import fit_cart
        depth = args.cart_depth
        pool_rng = np.random.default_rng(opts["seed"] + 17)
        pool = [synthetic.gen_task(pool_rng, n_eval=0) for _ in range(args.global_pool_tasks)]
        Xg = np.concatenate([t.X_build for t in pool], axis=0)
        yg = np.concatenate([t.y_build for t in pool])

        def local_cart(Xb, yb, Xq):
            t = fit_cart(Xb, yb, depth, "classification")
            return t.predict(Xq), None

        def global_cart(Xb, yb, Xq):
            t = fit_cart(np.concatenate([Xg, Xb]), np.concatenate([yg, yb]),
                         depth, "classification")
            return t.predict(Xq), None

        models[f"local_cart_d{depth}"] = local_cart
        models[f"global_cart_d{depth}"] = global_cart
    sizes = [int(s) for s in args.set_sizes.split(",")]
    path = os.path.join(out, "sweep.csv")
    synthetic.sweep(models, sizes, opts["repeats"], seed=opts["seed"], out_path=path)
    write_manifest(out, "sweep", dict(opts, set_sizes=sizes), inputs, [path])
    print(f"wrote {path}")
    return EXIT_OK


def _meta_sweep_adapter(model):
    def predict(Xb, yb, Xq):
        return synthetic.meta_predict(model, Xb, yb, Xq)
    return predict


def cmd_robustness(args):
    opts = _merge_options(args, dict(MODEL_KEYS, repeats=10))
    out = _out_dir(args)
    dataset = _load_dataset(args)
    model = MetaModel.load(args.checkpoint)
    fractions = [float(f) for f in args.fractions.split(",")]
    path = os.path.join(out, "robustness.csv")
    evaluation.robustness_study(model, dataset.train_users, fractions,
                                repeats=opts["repeats"], seed=opts["seed"],
                                local_depth=args.local_depth, out_path=path,
                                max_users=args.max_users)
    write_manifest(out, "robustness", dict(opts, fractions=fractions),
                   _dataset_inputs(args) + [args.checkpoint], [path])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_coldstart(args):
    opts = _merge_options(args, dict(MODEL_KEYS))
    out = _out_dir(args)
    dataset = _load_dataset(args)
    model = MetaModel.load(args.checkpoint)
    path = os.path.join(out, "coldstart.csv")
    evaluation.coldstart_study(model, dataset, out_path=path)
    write_manifest(out, "coldstart", opts,
                   _dataset_inputs(args) + [args.checkpoint], [path])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_contrarian(args):
    opts = _merge_options(args, dict(MODEL_KEYS))
    out = _out_dir(args)
    dataset = _load_dataset(args)
    model = MetaModel.load(args.checkpoint)
    users_path = os.path.join(out, "contrarian_users.csv")
    bins_path = os.path.join(out, "contrarian_bins.csv")
    evaluation.contrarian_study(model, dataset, out_path=users_path,
                                bins_path=bins_path)
    write_manifest(out, "contrarian", opts,
                   _dataset_inputs(args) + [args.checkpoint],
                   [users_path, bins_path])
    print(f"wrote {users_path} and {bins_path}")
    return EXIT_OK


def cmd_model_describe(args):
    model = MetaModel.load(args.checkpoint)
    print(model.describe())
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="metatree",
                                     description="Per-user explainable tree recommender")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-synthetic", help="train on the synthetic meta-task")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--n-loss", type=int, default=None, dest="n_loss")
    p.add_argument("--aux-schedule", default=None, dest="aux_schedule",
                   help="PURE,FULL,ZERO step marks for annealed structure "
                        "supervision (see synthetic.episodic_train)")
    p.add_argument("--aux-weight", type=float, default=None, dest="aux_weight")
    p.add_argument("--build-sizes", default=None, dest="build_sizes",
                   help="LO,HI inclusive range for training |L'|")
    p.set_defaults(func=cmd_train_synthetic)

    p = sub.add_parser("train-rs", help="train on a ratings dataset")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_train_rs)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--routing", choices=("soft", "hard"), default="soft")
    p.add_argument("--sparsified", type=_bool, default=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate all ablation variants")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--variants", default=None,
                   help="comma-separated subset (default: all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="print a user's tree and a decision path")
    _add_common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--item", type=int, default=None)
    p.add_argument("--format", choices=("text", "json", "dot"), default="text")
    p.add_argument("--sparsified", type=_bool, default=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("sweep", help="synthetic accuracy curves over set sizes")
    _add_common(p)
    p.add_argument("--model", action="append", default=[],
                   help="NAME=CHECKPOINT (repeatable)")
    p.add_argument("--set-sizes", default="1,5,10,20,30,40,50")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--cart-depth", type=int, default=None,
                   help="also run local/global CART baselines at this depth")
    p.add_argument("--global-pool-tasks", type=int, default=500)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("robustness", help="feature stability under subsampling")
    _add_common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fractions", default="0,0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--local-depth", type=int, default=3)
    p.add_argument("--max-users", type=int, default=None)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("coldstart", help="average-rating-only trees by set size")
    _add_common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_coldstart)

    p = sub.add_parser("contrarian", help="rating correlation analysis")
    _add_common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_contrarian)

    p = sub.add_parser("model-describe", help="print checkpoint architecture")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_model_describe)

    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("METATREE_LOGLEVEL", "INFO"),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ValueError, KeyError) as exc:
        print(f"error: schema: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as exc:  # noqa: BLE001
        print(f"error: internal: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
