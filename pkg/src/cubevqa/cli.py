"""Command-line interface: synth, train, eval, ablate, gradcheck.

Every command is reproducible from its flags: all randomness flows from the
run seed through named sub-streams. Exit codes: 0 success, 1 usage error,
2 I/O or format error, 3 validation or numeric failure.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import data, metrics, model, training
from . import tensor as T
from .model import ModelConfig, VqaModel, VARIANT_LABELS, canonical_variant
from .tensor import InvalidArgumentError, ShapeError, VocabularyError
from .training import TrainConfig, apply_overrides, substream

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(args, command):
    if args.out:
        return args.out
    root = os.environ.get("CUBEVQA_OUTPUT_ROOT")
    if root:
        return os.path.join(root, command)
    raise UsageError("--out is required (or set CUBEVQA_OUTPUT_ROOT)")


def _write_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    out = _out_dir(args, "synth")
    os.makedirs(out, exist_ok=True)
    train_bundle = data.generate_toy_dataset(args.task, args.size, args.k, args.d,
                                             args.seed, split="train")
    test_bundle = data.generate_toy_dataset(args.task, max(args.size // 4, 1),
                                            args.k, args.d, args.seed, split="test")
    # the test split reuses the training vocabularies
    data.assign_labels(test_bundle.examples, train_bundle.answer_vocab)
    merged = data.FeatureContainer()
    for image_id, feats in train_bundle.container.records.items():
        merged.add(image_id, feats)
    for image_id, feats in test_bundle.container.records.items():
        merged.add(image_id, feats)
    data.write_features(merged, os.path.join(out, "features.cvaf"))
    data.write_examples(train_bundle.examples, os.path.join(out, "train.txt"))
    data.write_examples(test_bundle.examples, os.path.join(out, "test.txt"))
    data.write_vocab(train_bundle.question_vocab, os.path.join(out, "question_vocab.txt"))
    data.write_vocab(train_bundle.answer_vocab, os.path.join(out, "answer_vocab.txt"))
    print(f"wrote {args.task} dataset to {out}: {len(train_bundle.examples)} train, "
          f"{len(test_bundle.examples)} test, K={args.k}, D={args.d}, "
          f"{len(train_bundle.answer_vocab)} answers")
    return 0


# ---------------------------------------------------------------------------
# shared loading


def _load_prepared(data_dir, max_question_len=26):
    container = data.load_features(os.path.join(data_dir, "features.cvaf"))
    question_vocab = data.load_vocab(os.path.join(data_dir, "question_vocab.txt"))
    answer_vocab = data.load_vocab(os.path.join(data_dir, "answer_vocab.txt"))
    train_examples = data.load_examples(os.path.join(data_dir, "train.txt"),
                                        num_answers=len(answer_vocab))
    test_examples = data.load_examples(os.path.join(data_dir, "test.txt"),
                                       num_answers=len(answer_vocab))
    train_set = data.prepare_dataset(container, train_examples, question_vocab,
                                     answer_vocab, max_question_len)
    test_set = data.prepare_dataset(container, test_examples, question_vocab,
                                    answer_vocab, max_question_len)
    return train_set, test_set, container


def _train_config(args):
    config = training.parse_config_file(args.config) if args.config else TrainConfig()
    overrides = dict(learning_rate=args.lr, batch_size=args.batch_size,
                     epochs=args.epochs, clip_norm=args.clip_norm,
                     dropout=args.dropout, seed=args.seed, profile=args.profile)
    return apply_overrides(config, {k: v for k, v in overrides.items() if v is not None})


def _model_config(variant, train_set, config, literal_spatial=False):
    return ModelConfig.from_profile(
        config.profile, variant=variant,
        vocab_size=len(train_set.question_vocab),
        num_answers=len(train_set.answer_vocab),
        feat_dim=train_set.features[0].shape[1],
        tanh_after_sum=not literal_spatial)


def _fit(vqa_model, train_set, config, log=None, start_epoch=0):
    history = []
    for epoch in range(start_epoch, config.epochs):
        loss, acc = training.train_epoch(vqa_model, train_set, config, epoch)
        history.append((epoch, loss, acc))
        if log:
            log(f"epoch {epoch:3d}  loss {loss:.6f}  train_acc {acc:.4f}")
    return history


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    out = _out_dir(args, "train")
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    config = _train_config(args)
    variant = canonical_variant(args.variant)
    train_set, test_set, _ = _load_prepared(args.data)
    model_config = _model_config(variant, train_set, config,
                                 literal_spatial=args.literal_spatial)
    vqa_model = VqaModel(model_config, seed=config.seed)
    if args.embeddings:
        rows = data.load_pretrained_embeddings(args.embeddings,
                                               train_set.question_vocab,
                                               model_config.embed_dim)
        table = vqa_model.store["enc.embed"].value
        for index, vector in rows.items():
            table[index] = vector
        print(f"loaded {len(rows)} pretrained embedding rows")
    start_epoch = 0
    if args.resume:
        training.restore_checkpoint(vqa_model.store, args.resume)
        steps_per_epoch = -(-train_set.size() // config.batch_size)
        if vqa_model.store.step % steps_per_epoch:
            raise InvalidArgumentError(
                "checkpoint stops mid-epoch; resume requires an epoch boundary")
        start_epoch = vqa_model.store.step // steps_per_epoch
    _fit(vqa_model, train_set, config, log=print, start_epoch=start_epoch)
    checkpoint_path = os.path.join(out, "checkpoint.cvac")
    training.save_checkpoint(vqa_model.store, checkpoint_path)
    report = metrics.evaluate(vqa_model, test_set)
    manifest = {
        "command": "train",
        "variant": variant,
        "seed": config.seed,
        "train_config": asdict(config),
        "model": model_config.to_dict(),
        "data_dir": os.path.abspath(args.data),
        "checkpoint": os.path.abspath(checkpoint_path),
        "started_at": started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "final_metrics": {"test_accuracy": report.accuracy},
    }
    _write_atomic(os.path.join(out, "manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"test_accuracy {report.accuracy:.4f}")
    print(f"checkpoint written to {checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    manifest_path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                 "manifest.json")
    if not os.path.exists(manifest_path):
        raise data.FormatError(f"no manifest.json next to checkpoint {args.checkpoint}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    model_config = ModelConfig(**manifest["model"])
    vqa_model = VqaModel(model_config, seed=manifest.get("seed", 0))
    training.restore_checkpoint(vqa_model.store, args.checkpoint)
    train_set, test_set, _ = _load_prepared(args.data,
                                            model_config.max_question_len)
    dataset = train_set if args.split == "train" else test_set
    taxonomy = metrics.Taxonomy.load(args.taxonomy) if args.taxonomy else None
    report = metrics.evaluate(vqa_model, dataset, taxonomy=taxonomy)
    sys.stdout.write(report.to_text())
    csv_path = args.csv or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                        "eval_report.csv")
    _write_atomic(csv_path, report.to_csv())
    print(f"csv written to {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def run_ablation(datasets, config, num_seeds, literal_spatial=False, log=None,
                 variants=model.VARIANTS):
    """Train every variant on every dataset over ``num_seeds`` seeds.

    ``datasets`` maps a display name to ``(train_set, test_set)``. Returns
    ``{variant: {dataset_name: [accuracy per seed]}}``.
    """
    results = {v: {name: [] for name in datasets} for v in variants}
    for variant in variants:
        for name, (train_set, test_set) in datasets.items():
            for offset in range(num_seeds):
                run_config = apply_overrides(config, {"seed": str(config.seed + offset)})
                model_config = _model_config(variant, train_set, run_config,
                                             literal_spatial=literal_spatial)
                vqa_model = VqaModel(model_config, seed=run_config.seed)
                _fit(vqa_model, train_set, run_config)
                report = metrics.evaluate(vqa_model, test_set)
                results[variant][name].append(report.accuracy)
                if log:
                    log(f"{VARIANT_LABELS[variant]:<6} {name:<12} seed {run_config.seed}: "
                        f"test_acc {report.accuracy:.4f}")
    return results


def ablation_table(results, dataset_names):
    """Render mean +/- stdev per variant and dataset as text and CSV."""
    text_lines = [f"{'variant':<8}" + "".join(f"{name:>22}" for name in dataset_names)]
    csv_lines = ["variant,dataset,mean,stdev,seeds"]
    for variant in model.VARIANTS:
        label = VARIANT_LABELS[variant]
        cells = []
        for name in dataset_names:
            accs = np.array(results[variant][name])
            mean, std = float(accs.mean()), float(accs.std())
            cells.append(f"{mean:.4f} ± {std:.4f}".rjust(22))
            csv_lines.append(f"{label},{name},{mean:.6f},{std:.6f},{accs.size}")
        text_lines.append(f"{label:<8}" + "".join(cells))
    return "\n".join(text_lines) + "\n", "\n".join(csv_lines) + "\n"


def cmd_ablate(args):
    out = _out_dir(args, "ablate")
    os.makedirs(out, exist_ok=True)
    config = _train_config(args)
    datasets = {}
    for data_dir in args.data:
        name = os.path.basename(os.path.normpath(data_dir))
        train_set, test_set, _ = _load_prepared(data_dir)
        datasets[name] = (train_set, test_set)
    results = run_ablation(datasets, config, args.seeds,
                           literal_spatial=args.literal_spatial, log=print)
    text, csv = ablation_table(results, list(datasets))
    _write_atomic(os.path.join(out, "table.txt"), text)
    _write_atomic(os.path.join(out, "table.csv"), csv)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_model(variant, seed, literal_spatial=False, eps=1e-5):
    """Finite-difference check of one tiny random instance.

    Returns ``(max_relative_error, per_parameter)`` over every parameter of
    the variant at K=4, D=8, H=8, h_a=8, E=8, T=3, A=5.
    """
    config = ModelConfig(variant=variant, vocab_size=9, num_answers=5, feat_dim=8,
                         embed_dim=8, hidden_dim=8, attn_dim=8, fuse_dim=8,
                         tanh_after_sum=not literal_spatial)
    vqa_model = VqaModel(config, seed=seed)
    rng = substream(seed, "gradcheck", variant)
    features = rng.uniform(-1.0, 1.0, size=(4, 8))
    token_ids = rng.integers(0, config.vocab_size, size=3)
    label = int(rng.integers(0, config.num_answers))

    leaves = vqa_model.leaves()
    tape = T.Tape()
    loss = vqa_model.instance_loss(tape, features, token_ids, label, leaves=leaves)
    tape.backward(loss)
    grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
             for name, leaf in leaves.items()}

    # the probe evaluations share one set of leaf tensors: they alias the
    # store arrays, so in-place perturbations are visible without rebuilding
    eval_leaves = vqa_model.leaves()

    def f():
        return float(vqa_model.instance_loss(None, features, token_ids, label,
                                             leaves=eval_leaves).value)

    return T.finite_difference_check(f, vqa_model.store.values(), grads, eps=eps)


def _gradcheck_cell(cell):
    variant, seed, literal = cell
    return gradcheck_model(variant, seed, literal_spatial=literal)


def cmd_gradcheck(args):
    variants = list(model.VARIANTS) if args.variant == "all" else [canonical_variant(args.variant)]
    cells = [(variant, args.seed + offset, args.literal_spatial)
             for variant in variants for offset in range(args.seeds)]
    # each cell is an independent deterministic job; results are aggregated
    # in the fixed cell order, so parallel execution changes nothing
    results = None
    if len(cells) > 1 and (os.cpu_count() or 1) > 1:
        try:
            import concurrent.futures
            with concurrent.futures.ProcessPoolExecutor(max_workers=2) as pool:
                results = list(pool.map(_gradcheck_cell, cells))
        except (OSError, ImportError):
            results = None
    if results is None:
        results = [_gradcheck_cell(cell) for cell in cells]
    worst_overall = 0.0
    worst_name = None
    group_worst = {}
    for (variant, _, _), (_, per_name) in zip(cells, results):
        for name, err in per_name.items():
            key = (variant, name.split(".")[0])
            group_worst[key] = max(group_worst.get(key, 0.0), err)
            if err > worst_overall:
                worst_overall = err
                worst_name = f"{variant}:{name}"
    for variant, group in sorted(group_worst):
        print(f"{variant:<6} {group:<6} max_rel_err {group_worst[(variant, group)]:.3e}")
    if worst_overall > GRADCHECK_TOLERANCE:
        print(f"FAIL: {worst_name} max_rel_err {worst_overall:.3e} "
              f"exceeds {GRADCHECK_TOLERANCE:.0e}", file=sys.stderr)
        return 3
    print(f"OK: max_rel_err {worst_overall:.3e} within {GRADCHECK_TOLERANCE:.0e}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = _Parser(prog="cubevqa",
                     description="Channel/region attention VQA: synthesize, train, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic diagnostic dataset")
    p.add_argument("--task", choices=("spatial", "channel", "mixed"), required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(q):
        q.add_argument("--config", default=None, help="key = value config file")
        q.add_argument("--lr", default=None)
        q.add_argument("--batch-size", dest="batch_size", default=None)
        q.add_argument("--epochs", default=None)
        q.add_argument("--clip-norm", dest="clip_norm", default=None)
        q.add_argument("--dropout", default=None)
        q.add_argument("--seed", default=None)
        q.add_argument("--profile", choices=("desk", "full"), default=None)
        q.add_argument("--literal-spatial", action="store_true",
                       help="score regions with the question term outside the "
                            "tanh (weights become question-independent)")

    p = sub.add_parser("train", help="train one variant on a dataset directory")
    p.add_argument("--variant", required=True,
                   choices=("ca", "ra", "cva", "cva-v", "r-cva"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--embeddings", default=None,
                   help="pretrained embedding text file (token v1 ... vE per line)")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train all four variants over several seeds")
    p.add_argument("--data", action="append", required=True,
                   help="dataset directory (repeatable)")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", type=int, default=5)
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny instance")
    p.add_argument("--variant", default="all",
                   choices=("ca", "ra", "cva", "cva-v", "r-cva", "all"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds to sweep")
    p.add_argument("--literal-spatial", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (OSError, data.FormatError, training.CheckpointFormatError,
            json.JSONDecodeError) as err:
        print(f"i/o or format error: {err}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, ShapeError, VocabularyError,
            metrics.TaxonomyError, FloatingPointError) as err:
        print(f"validation error: {err}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
