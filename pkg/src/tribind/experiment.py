"""End-to-end comparison of the two training configurations: the combined
objective (edge loss on) against the text-only ablation, over a seed
sweep on the default synthetic dataset.

Per seed: generate data, split train/test, train both configurations from
the same initialization, then score on the held-out split:

* cross-modal retrieval recall@1 between the two non-text modalities over
  the test pairs (mean of both directions),
* cross-modal zero-shot balanced accuracy (image queries classified
  against sequence-embedding class prototypes),
* modality-to-text retrieval RSUM (the edge loss must not collapse it).

The report carries per-seed numbers, medians, and the derived gap /
parity figures so downstream checks need no recomputation.
"""

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, SyntheticConfig, generate_synthetic, split_dataset
from .evaluation import (
    balanced_accuracy,
    cross_modal_retrieval,
    cross_modal_zero_shot,
    embed_dataset,
    modality_to_text_retrieval,
)
from .model import ModelConfig, build_vocab, init_model
from .seeding import derive_seed
from .train import TrainConfig, train


@dataclass
class BindingExperimentConfig:
    num_records: int = 2000
    num_classes: int = 4
    pairing_rate: float = 0.25
    duplicate_text_rate: float = 0.3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 30
    batch_size: int = 32
    lr_max: float = 4e-4
    embed_dim: int = 32
    holdout_fraction: float = 0.2


def evaluate_binding(model, test_ds: Dataset) -> dict:
    """Held-out binding metrics for one trained model."""
    xr = cross_modal_retrieval(model, test_ds)
    r1 = 0.5 * (
        xr["image_to_sequence"]["recall@1"] + xr["sequence_to_image"]["recall@1"]
    )
    mt = modality_to_text_retrieval(model, test_ds)

    emb = embed_dataset(model, test_ds)
    img_rows, img_emb = emb["image"]
    seq_rows, seq_emb = emb["sequence"]
    img_labels = np.array([test_ds.records[i].class_id for i in img_rows])
    seq_labels = np.array([test_ds.records[i].class_id for i in seq_rows])
    preds = cross_modal_zero_shot(img_emb, seq_emb, seq_labels)
    return {
        "cross_modal_recall1": r1,
        "cross_modal_retrieval": xr,
        "cross_modal_zero_shot_acc": balanced_accuracy(preds, img_labels),
        "text_retrieval_rsum": mt["rsum"],
        "text_retrieval": {k: v for k, v in mt.items() if k != "rsum"},
    }


def run_binding_seed(cfg: BindingExperimentConfig, seed: int, emcl_enabled: bool) -> dict:
    """One (seed, configuration) cell of the sweep."""
    ds = generate_synthetic(
        SyntheticConfig(
            num_records=cfg.num_records,
            num_classes=cfg.num_classes,
            pairing_rate=cfg.pairing_rate,
            duplicate_text_rate=cfg.duplicate_text_rate,
            seed=derive_seed(seed, "data"),
        )
    )
    train_ds, test_ds = split_dataset(ds, cfg.holdout_fraction, derive_seed(seed, "split"))
    model_cfg = ModelConfig(
        embed_dim=cfg.embed_dim, vocab=build_vocab([r.text for r in train_ds.records])
    )
    model = init_model(model_cfg, seed=derive_seed(seed, "init"))
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr_max=cfg.lr_max,
        emcl_enabled=emcl_enabled,
        seed=derive_seed(seed, "train"),
    )
    result = train(train_ds, model, train_cfg)
    metrics = evaluate_binding(result.model, test_ds)
    metrics["final_loss"] = result.history[-1]["loss"]
    return metrics


def run_binding_comparison(cfg: BindingExperimentConfig | None = None) -> dict:
    """Full sweep; returns per-seed metrics, medians, and comparison figures."""
    cfg = cfg or BindingExperimentConfig()
    started = time.time()
    per_seed: dict[str, list[dict]] = {"bound": [], "text_only": []}
    for seed in cfg.seeds:
        per_seed["bound"].append(run_binding_seed(cfg, seed, emcl_enabled=True))
        per_seed["text_only"].append(run_binding_seed(cfg, seed, emcl_enabled=False))

    def median_of(rows, key):
        return float(np.median([r[key] for r in rows]))

    medians = {
        variant: {
            "cross_modal_recall1": median_of(rows, "cross_modal_recall1"),
            "cross_modal_zero_shot_acc": median_of(rows, "cross_modal_zero_shot_acc"),
            "text_retrieval_rsum": median_of(rows, "text_retrieval_rsum"),
        }
        for variant, rows in per_seed.items()
    }
    bound, text_only = medians["bound"], medians["text_only"]
    comparison = {
        "recall1_gap": bound["cross_modal_recall1"] - text_only["cross_modal_recall1"],
        "zero_shot_gap": bound["cross_modal_zero_shot_acc"]
        - text_only["cross_modal_zero_shot_acc"],
        "rsum_ratio": (
            bound["text_retrieval_rsum"] / text_only["text_retrieval_rsum"]
            if text_only["text_retrieval_rsum"] > 0
            else float("inf")
        ),
    }
    return {
        "config": {
            "num_records": cfg.num_records,
            "num_classes": cfg.num_classes,
            "pairing_rate": cfg.pairing_rate,
            "duplicate_text_rate": cfg.duplicate_text_rate,
            "seeds": list(cfg.seeds),
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "lr_max": cfg.lr_max,
            "embed_dim": cfg.embed_dim,
            "holdout_fraction": cfg.holdout_fraction,
        },
        "per_seed": per_seed,
        "medians": medians,
        "comparison": comparison,
        "elapsed_seconds": time.time() - started,
    }
