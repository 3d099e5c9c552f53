"""Command-line entry point orchestrating the full pipeline.

Every command writes its artifact plus a run manifest (command, resolved
config, seed, dataset hash, tool version, timestamps, output paths).
Config precedence: CLI flags > config-file values > built-in defaults;
all randomness derives from one --seed through named sub-streams.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .data import (
    DEFAULT_PROMPT_TEMPLATE,
    Excluded,
    SyntheticConfig,
    default_rules,
    generate_demographics,
    generate_ecg_report,
    generate_synthetic,
    label_text,
    load_dataset,
    load_rules,
    make_prompt,
    save_dataset,
    split_dataset,
)
from .downstream import FusionConfig, train_fusion
from .errors import (
    InvalidConfigError,
    MissingFieldError,
    SchemaVersionMismatchError,
    TribindError,
)
from .evaluation import (
    ZeroShotSpec,
    balanced_accuracy,
    cross_modal_retrieval,
    cross_modal_zero_shot,
    embed_dataset,
    export_embeddings,
    few_shot_probe,
    modality_to_text_retrieval,
    save_report,
    zero_shot_classify,
)
from .model import ModelConfig, build_vocab, encode_texts, init_model, load_model
from .seeding import derive_seed
from .selfcheck import run_selfcheck
from .train import TrainConfig, train


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: str, command: str, config: dict, seed: int,
                    dataset_path: str | None, outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "dataset_hash": _sha256(dataset_path) if dataset_path else None,
        "tool_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
        "outputs": outputs,
    }
    tmp = f"{out_path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_path)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise InvalidConfigError("config file must hold a JSON object")
    return raw


def _resolve(args: argparse.Namespace, file_cfg: dict, defaults: dict) -> dict:
    """CLI flag > config file > default, per key of `defaults`."""
    resolved = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("TRIBIND_THREADS")
    return int(env) if env else 1


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    defaults = {
        "records": 2000, "classes": 4, "pairing_rate": 0.25,
        "duplicate_text_rate": 0.3, "noise_sigma": 1.0, "seed": 0,
    }
    cfg = _resolve(args, file_cfg, defaults)
    ds = generate_synthetic(
        SyntheticConfig(
            num_records=cfg["records"],
            num_classes=cfg["classes"],
            pairing_rate=cfg["pairing_rate"],
            duplicate_text_rate=cfg["duplicate_text_rate"],
            noise_sigma=cfg["noise_sigma"],
            seed=derive_seed(cfg["seed"], "data"),
        )
    )
    save_dataset(ds, args.out)
    _write_manifest(f"{args.out}.manifest.json", "gen-data", cfg, cfg["seed"],
                    None, [args.out], started)
    print(f"wrote {len(ds.records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    defaults = {
        "epochs": 30, "batch_size": 32, "lr_max": 4e-4, "lr_min": 0.0,
        "weight_decay": 0.1, "tau": 0.07, "emcl": True, "seed": 0,
        "augment_noise_sigma": 0.05, "embed_dim": 32, "hidden_dim": 64,
        "feature_dim": 32, "token_dim": 32, "val_fraction": 0.0,
    }
    cfg = _resolve(args, file_cfg, defaults)
    ds = load_dataset(args.data)
    if cfg["val_fraction"] > 0:
        train_ds, val_ds = split_dataset(ds, cfg["val_fraction"], derive_seed(cfg["seed"], "split"))
    else:
        train_ds, val_ds = ds, None

    shapes = {}
    for r in train_ds.records:
        if r.image_payload is not None:
            shapes["image"] = r.image_payload.shape
        if r.sequence_payload is not None:
            shapes["sequence"] = r.sequence_payload.shape
    model_cfg = ModelConfig(
        image_shape=shapes.get("image", (8, 8)),
        sequence_shape=shapes.get("sequence", (16, 4)),
        hidden_dim=cfg["hidden_dim"],
        feature_dim=cfg["feature_dim"],
        embed_dim=cfg["embed_dim"],
        token_dim=cfg["token_dim"],
        vocab=build_vocab([r.text for r in train_ds.records]),
    )
    model = init_model(model_cfg, seed=derive_seed(cfg["seed"], "init"))
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr_max=cfg["lr_max"],
        lr_min=cfg["lr_min"],
        weight_decay=cfg["weight_decay"],
        tau=cfg["tau"],
        emcl_enabled=cfg["emcl"],
        seed=derive_seed(cfg["seed"], "train"),
        augment_noise_sigma=cfg["augment_noise_sigma"],
    )
    result = train(train_ds, model, train_cfg, out_dir=args.out_dir, val_ds=val_ds)
    outputs = sorted(result.checkpoint_paths.values())
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), "train", cfg,
                    cfg["seed"], args.data, outputs, started)
    final = result.history[-1]
    print(f"trained {cfg['epochs']} epochs, final per-sample loss {final['loss']:.4f}")
    for name, path in sorted(result.checkpoint_paths.items()):
        print(f"  {name}: {path}")
    return 0


def _eval_common(args):
    ds = load_dataset(args.data)
    model = load_model(args.checkpoint)
    return ds, model


def cmd_eval_retrieval(args) -> int:
    started = time.time()
    ds, model = _eval_common(args)
    ks = _int_list(args.ks)
    report = {
        "retrieval": {
            "modality_to_text": modality_to_text_retrieval(model, ds, ks),
            "cross_modal": cross_modal_retrieval(model, ds, ks),
        }
    }
    save_report(report, args.out)
    _write_manifest(f"{args.out}.manifest.json", "eval-retrieval",
                    {"ks": ks}, args.seed, args.data, [args.out], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_eval_zeroshot(args) -> int:
    started = time.time()
    ds, model = _eval_common(args)
    if args.prompt_file:
        with open(args.prompt_file) as fh:
            prompts = json.load(fh)
        class_prompts = [prompts[name] for name in ds.class_names]
    else:
        class_prompts = [[make_prompt(DEFAULT_PROMPT_TEMPLATE, name)] for name in ds.class_names]
    spec = ZeroShotSpec(
        class_prompts=class_prompts,
        prompts_per_class_used=args.prompts_per_class,
    )
    report = {"zero_shot": {}}
    emb = embed_dataset(model, ds)
    for modality in ("image", "sequence"):
        rows, z = emb[modality]
        if not rows:
            continue
        preds = zero_shot_classify(
            z, spec, lambda texts: encode_texts(model, texts),
            seed=derive_seed(args.seed, "eval"),
        )
        labels = np.array([ds.records[i].class_id for i in rows])
        report["zero_shot"][modality] = {
            "balanced_accuracy": balanced_accuracy(preds, labels),
            "num_samples": len(rows),
            "prompts_per_class_used": args.prompts_per_class,
        }
    save_report(report, args.out)
    _write_manifest(f"{args.out}.manifest.json", "eval-zeroshot",
                    {"prompts_per_class": args.prompts_per_class}, args.seed,
                    args.data, [args.out], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_eval_fewshot(args) -> int:
    started = time.time()
    ds, model = _eval_common(args)
    shots = _int_list(args.shots)
    emb = embed_dataset(model, ds)
    rows, z = emb[args.modality]
    labels = np.array([ds.records[i].class_id for i in rows])
    report = {"few_shot": {args.modality: {}}}
    for k in shots:
        res = few_shot_probe(z, labels, k, repeats=args.repeats,
                             seed=derive_seed(args.seed, "eval"))
        report["few_shot"][args.modality][f"k={k}"] = {
            "mean_balanced_accuracy": res.mean_balanced_accuracy,
            "repeats": args.repeats,
        }
    save_report(report, args.out)
    _write_manifest(f"{args.out}.manifest.json", "eval-fewshot",
                    {"shots": shots, "repeats": args.repeats, "modality": args.modality},
                    args.seed, args.data, [args.out], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_eval_crossmodal(args) -> int:
    started = time.time()
    ds, model = _eval_common(args)
    emb = embed_dataset(model, ds)
    img_rows, img_emb = emb["image"]
    seq_rows, seq_emb = emb["sequence"]
    report = {"cross_modal": {"retrieval": cross_modal_retrieval(model, ds)}}
    if img_rows and seq_rows:
        img_labels = np.array([ds.records[i].class_id for i in img_rows])
        seq_labels = np.array([ds.records[i].class_id for i in seq_rows])
        preds_img = cross_modal_zero_shot(img_emb, seq_emb, seq_labels, mode=args.mode)
        preds_seq = cross_modal_zero_shot(seq_emb, img_emb, img_labels, mode=args.mode)
        report["cross_modal"]["zero_shot"] = {
            "image_query": balanced_accuracy(preds_img, img_labels),
            "sequence_query": balanced_accuracy(preds_seq, seq_labels),
            "mode": args.mode,
        }
    save_report(report, args.out)
    _write_manifest(f"{args.out}.manifest.json", "eval-crossmodal",
                    {"mode": args.mode}, args.seed, args.data, [args.out], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_downstream(args) -> int:
    started = time.time()
    ds, model = _eval_common(args)
    cfg = FusionConfig(
        projection_dim=args.projection_dim,
        hidden_dim=args.hidden_dim,
        epochs=args.epochs,
        lr=args.lr,
        seed=derive_seed(args.seed, "eval"),
        mode=args.mode,
    )
    result = train_fusion(ds, model, cfg, outcome=args.outcome)
    report = {
        "downstream": {
            args.outcome: {
                "mode": result.mode,
                "balanced_accuracy": result.balanced_accuracy,
                "train_size": result.train_size,
                "holdout_size": result.holdout_size,
            }
        }
    }
    save_report(report, args.out)
    _write_manifest(f"{args.out}.manifest.json", "downstream",
                    {"mode": args.mode, "outcome": args.outcome, "epochs": args.epochs},
                    args.seed, args.data, [args.out], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_label_text(args) -> int:
    rules = load_rules(args.rules) if args.rules else default_rules()
    outcome = label_text(args.text, rules)
    if isinstance(outcome, Excluded):
        print(f"excluded: {outcome.reason}")
    else:
        print(outcome)
    return 0


def cmd_make_prompts(args) -> int:
    if args.kind == "label":
        if not args.labels:
            raise MissingFieldError("--labels is required for kind=label")
        for label in args.labels.split(","):
            print(make_prompt(args.template, label.strip()))
    elif args.kind == "ecg-report":
        if not args.reports:
            raise MissingFieldError("--reports is required for kind=ecg-report")
        print(generate_ecg_report(args.reports))
    else:
        print(
            generate_demographics(
                {
                    "gender": args.gender,
                    "anchor_age": args.age,
                    "admission_type": args.admission_type,
                    "admission_location": args.location,
                }
            )
        )
    return 0


def cmd_export_embeddings(args) -> int:
    started = time.time()
    ds, model = _eval_common(args)
    export_embeddings(ds, model, args.out)
    _write_manifest(f"{args.out}.manifest.json", "export-embeddings", {},
                    args.seed, args.data, [args.out], started)
    print(f"wrote embeddings for {len(ds.records)} records to {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(seed=args.seed)
    failed = 0
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 2


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tribind",
        description="Desk-scale tri-modality contrastive binding laboratory",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=True, out=True):
        if data:
            p.add_argument("--data", required=True, help="dataset JSONL file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint JSON")
        if out:
            p.add_argument("--out", required=True, help="output file path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (TRIBIND_THREADS equivalent)")

    p = sub.add_parser("gen-data", help="generate a synthetic tri-modal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--records", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--pairing-rate", dest="pairing_rate", type=float, default=None)
    p.add_argument("--duplicate-text-rate", dest="duplicate_text_rate", type=float, default=None)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train encoders on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr-max", dest="lr_max", type=float, default=None)
    p.add_argument("--lr-min", dest="lr_min", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    emcl_group = p.add_mutually_exclusive_group()
    emcl_group.add_argument("--emcl", dest="emcl", action="store_true", default=None)
    emcl_group.add_argument("--no-emcl", dest="emcl", action="store_false")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="modality-to-text and cross-modal recall@K")
    common(p)
    p.add_argument("--ks", default="1,5,10")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-zeroshot", help="prompt-based zero-shot classification")
    common(p)
    p.add_argument("--prompts-per-class", dest="prompts_per_class", type=int, default=None,
                   help="subsample this many prompts per class (e.g. 10 of 20)")
    p.add_argument("--prompt-file", default=None,
                   help="JSON mapping class name -> list of prompts")
    p.set_defaults(func=cmd_eval_zeroshot)

    p = sub.add_parser("eval-fewshot", help="few-shot linear probing")
    common(p)
    p.add_argument("--shots", default="1,2,4,8,16")
    p.add_argument("--repeats", type=int, default=300)
    p.add_argument("--modality", choices=("image", "sequence"), default="image")
    p.set_defaults(func=cmd_eval_fewshot)

    p = sub.add_parser("eval-crossmodal", help="cross-modality retrieval and zero-shot")
    common(p)
    p.add_argument("--mode", choices=("prototype", "1nn"), default="prototype")
    p.set_defaults(func=cmd_eval_crossmodal)

    p = sub.add_parser("downstream", help="outcome prediction from frozen embeddings")
    common(p)
    p.add_argument("--mode", choices=("text_only", "text_plus_embeddings"),
                   default="text_plus_embeddings")
    p.add_argument("--outcome", choices=("readmit", "mortality"), default="readmit")
    p.add_argument("--projection-dim", dest="projection_dim", type=int, default=16)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=32)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.02)
    p.set_defaults(func=cmd_downstream)

    p = sub.add_parser("label-text", help="rule-based labeling of one text")
    p.add_argument("--text", required=True)
    p.add_argument("--rules", default=None, help="rules JSON (default: bundled rules)")
    p.set_defaults(func=cmd_label_text)

    p = sub.add_parser("make-prompts", help="generate prompt / report / demographics text")
    p.add_argument("--kind", choices=("label", "ecg-report", "demographics"), default="label")
    p.add_argument("--labels", default=None, help="comma-separated labels (kind=label)")
    p.add_argument("--template", default=DEFAULT_PROMPT_TEMPLATE)
    p.add_argument("--reports", nargs="*", default=None, help="report lines (kind=ecg-report)")
    p.add_argument("--gender", default=None)
    p.add_argument("--age", default=None)
    p.add_argument("--admission-type", dest="admission_type", default=None)
    p.add_argument("--location", default=None)
    p.set_defaults(func=cmd_make_prompts)

    p = sub.add_parser("export-embeddings", help="CSV embedding export")
    common(p)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("selfcheck", help="gradient and reduction property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _threads(args)  # recorded for compatibility; computation is single-threaded
    try:
        return args.func(args)
    except (
        InvalidConfigError,
        MissingFieldError,
        SchemaVersionMismatchError,
        FileNotFoundError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TribindError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
