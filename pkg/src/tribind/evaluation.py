"""Evaluation protocols over frozen models: top-K retrieval and RSUM,
prompt-based zero-shot, few-shot linear probing, cross-modality zero-shot,
balanced accuracy, and embedding export.

Ties break toward the lowest index everywhere so every metric is
deterministic. "Cosine distance" is 1 - cosine similarity on the
unit-norm embeddings.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import Dataset, normalize_text, pair_records
from .errors import (
    EmptyGalleryError,
    InsufficientSamplesError,
    LengthMismatchError,
    MissingClassSupportError,
)
from .model import Model, encode_payloads, encode_texts
from .numerics import l2_normalize_rows

DEFAULT_KS = (1, 5, 10)


def recall_at_k(query_emb, gallery_emb, relevant, k: int) -> float:
    """Percentage of queries with a relevant gallery item in the top k.

    Ranking is by cosine similarity, ties broken toward the lower gallery
    index. `relevant` holds one non-empty index set per query; duplicates
    of a query's ground truth in the gallery all count.
    """
    queries = np.asarray(query_emb, dtype=np.float64)
    gallery = np.asarray(gallery_emb, dtype=np.float64)
    if gallery.shape[0] == 0:
        raise EmptyGalleryError("gallery is empty")
    if len(relevant) != queries.shape[0]:
        raise LengthMismatchError(
            f"{len(relevant)} relevance sets for {queries.shape[0]} queries"
        )
    sims = queries @ gallery.T
    hits = 0
    order_cols = np.arange(gallery.shape[0])
    for i in range(queries.shape[0]):
        if not relevant[i]:
            raise LengthMismatchError(f"query {i} has an empty relevant set")
        top = np.lexsort((order_cols, -sims[i]))[:k]
        if set(top.tolist()) & set(relevant[i]):
            hits += 1
    return 100.0 * hits / queries.shape[0] if queries.shape[0] else 0.0


def rsum(recalls) -> float:
    """Arithmetic sum of the configured recall values."""
    return float(sum(recalls))


@dataclass
class ZeroShotSpec:
    """Per-class prompt lists; optionally subsample prompts once per run."""

    class_prompts: list[list[str]]
    prompts_per_class_used: int | None = None

    def used_prompts(self, seed: int = 0) -> list[list[str]]:
        if self.prompts_per_class_used is None:
            return [list(p) for p in self.class_prompts]
        rng = np.random.default_rng(seed)
        out = []
        for prompts in self.class_prompts:
            take = min(self.prompts_per_class_used, len(prompts))
            idx = sorted(rng.choice(len(prompts), size=take, replace=False).tolist())
            out.append([prompts[i] for i in idx])
        return out


def zero_shot_classify(modality_emb, spec: ZeroShotSpec, text_encoder, seed: int = 0) -> np.ndarray:
    """Predict the class whose prompts lie at the least mean cosine distance.

    text_encoder maps a list of prompt strings to unit embeddings. When
    prompts_per_class_used is set, the prompt subset is drawn once per
    call from `seed`; argmin ties go to the lowest class index.
    """
    emb = np.asarray(modality_emb, dtype=np.float64)
    used = spec.used_prompts(seed)
    mean_dist = np.empty((emb.shape[0], len(used)))
    for c, prompts in enumerate(used):
        prompt_emb = np.asarray(text_encoder(prompts), dtype=np.float64)
        dist = 1.0 - emb @ prompt_emb.T
        mean_dist[:, c] = dist.mean(axis=1)
    return np.argmin(mean_dist, axis=1)


@dataclass
class FewShotResult:
    mean_balanced_accuracy: float
    per_repeat: list[float]


def _fit_logistic(x: np.ndarray, y: np.ndarray, num_classes: int, iters: int = 200, lr: float = 0.1):
    """Multinomial logistic regression by plain gradient descent from zeros."""
    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(iters):
        logits = x @ w + b
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / x.shape[0]
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def few_shot_probe(
    embeddings, labels, k: int, repeats: int = 300, seed: int = 0
) -> FewShotResult:
    """Mean balanced accuracy of a linear probe over random support sets.

    Each repeat draws k support samples per class (per-repeat RNG seeded
    seed + repeat index), fits a logistic classifier on the frozen
    embeddings (200 iterations, lr 0.1, no regularization), and scores
    balanced accuracy on the held-out remainder.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    class_indices = [np.flatnonzero(y == c) for c in classes]
    for c, idx in zip(classes, class_indices):
        if len(idx) < k:
            raise InsufficientSamplesError(f"class {c} has {len(idx)} < k={k} samples")
    remap = {c: i for i, c in enumerate(classes.tolist())}
    y_mapped = np.array([remap[v] for v in y.tolist()])

    accs = []
    for r in range(repeats):
        rng = np.random.default_rng(seed + r)
        support = np.concatenate(
            [rng.choice(idx, size=k, replace=False) for idx in class_indices]
        )
        mask = np.zeros(len(y), dtype=bool)
        mask[support] = True
        w, b = _fit_logistic(x[mask], y_mapped[mask], len(classes))
        preds = np.argmax(x[~mask] @ w + b, axis=1)
        accs.append(balanced_accuracy(preds, y_mapped[~mask]))
    return FewShotResult(
        mean_balanced_accuracy=float(np.mean(accs)), per_repeat=accs
    )


def cross_modal_zero_shot(
    query_emb, support_emb, support_labels, mode: str = "prototype"
) -> np.ndarray:
    """Classify queries of one modality against a labeled support set of
    the other.

    prototype mode compares to the renormalized per-class mean support
    embedding; 1nn mode takes the nearest single support item. Ties break
    toward the lowest class (or support) index.
    """
    queries = np.asarray(query_emb, dtype=np.float64)
    support = np.asarray(support_emb, dtype=np.float64)
    labels = np.asarray(support_labels, dtype=np.int64)
    if support.shape[0] == 0:
        raise MissingClassSupportError("support set is empty")
    classes = np.unique(labels)

    if mode == "prototype":
        protos = np.stack([support[labels == c].mean(axis=0) for c in classes])
        protos = l2_normalize_rows(protos)
        dist = 1.0 - queries @ protos.T
        return classes[np.argmin(dist, axis=1)]
    if mode == "1nn":
        dist = 1.0 - queries @ support.T
        return labels[np.argmin(dist, axis=1)]
    raise ValueError(f"unknown mode {mode!r}")


def balanced_accuracy(preds, labels) -> float:
    """Unweighted mean of per-class recall, as a percentage."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape[0] != labels.shape[0]:
        raise LengthMismatchError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.shape[0] == 0:
        raise LengthMismatchError("no labels")
    recalls = [
        float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)
    ]
    return 100.0 * float(np.mean(recalls))


# ----------------------------------------------------------- orchestration


def embed_dataset(model: Model, ds: Dataset):
    """Per-modality unit embeddings for every record that has the payload.

    Returns dict modality -> (row record indices, embedding matrix), plus
    text embeddings for all records.
    """
    image_rows = [i for i, r in enumerate(ds.records) if r.image_payload is not None]
    seq_rows = [i for i, r in enumerate(ds.records) if r.sequence_payload is not None]
    out = {
        "text": (list(range(len(ds.records))), encode_texts(model, [r.text for r in ds.records])),
        "image": (
            image_rows,
            encode_payloads(model, "image", np.stack([ds.records[i].image_payload for i in image_rows]))
            if image_rows
            else np.zeros((0, model.config.embed_dim)),
        ),
        "sequence": (
            seq_rows,
            encode_payloads(model, "sequence", np.stack([ds.records[i].sequence_payload for i in seq_rows]))
            if seq_rows
            else np.zeros((0, model.config.embed_dim)),
        ),
    }
    return out


def modality_to_text_retrieval(model: Model, ds: Dataset, ks=DEFAULT_KS) -> dict:
    """Recall@K of retrieving each record's own text from the full text
    gallery (duplicate texts all count as relevant), per modality."""
    emb = embed_dataset(model, ds)
    text_emb = emb["text"][1]
    norm_texts = [normalize_text(r.text) for r in ds.records]
    by_text: dict[str, list[int]] = {}
    for j, t in enumerate(norm_texts):
        by_text.setdefault(t, []).append(j)

    report: dict = {}
    total = 0.0
    for mod in ("image", "sequence"):
        rows, q = emb[mod]
        if not rows:
            continue
        relevant = [by_text[norm_texts[i]] for i in rows]
        scores = {f"recall@{k}": recall_at_k(q, text_emb, relevant, k) for k in ks}
        report[f"{mod}_to_text"] = scores
        total += rsum(scores.values())
    report["rsum"] = total
    return report


def cross_modal_retrieval(model: Model, ds: Dataset, ks=DEFAULT_KS) -> dict:
    """Recall@K between the two non-text modalities over the paired subset."""
    pairs = pair_records(ds.records)
    if pairs.m == 0:
        return {"num_pairs": 0}
    img_idx = [p[0] for p in pairs.pairs]
    seq_idx = [p[1] for p in pairs.pairs]
    img_emb = encode_payloads(
        model, "image", np.stack([ds.records[i].image_payload for i in img_idx])
    )
    seq_emb = encode_payloads(
        model, "sequence", np.stack([ds.records[j].sequence_payload for j in seq_idx])
    )
    relevant = [[i] for i in range(pairs.m)]
    report = {
        "num_pairs": pairs.m,
        "image_to_sequence": {
            f"recall@{k}": recall_at_k(img_emb, seq_emb, relevant, k) for k in ks
        },
        "sequence_to_image": {
            f"recall@{k}": recall_at_k(seq_emb, img_emb, relevant, k) for k in ks
        },
    }
    report["rsum"] = rsum(report["image_to_sequence"].values()) + rsum(
        report["sequence_to_image"].values()
    )
    return report


def export_embeddings(ds: Dataset, model: Model, path: str) -> None:
    """CSV of non-text embeddings: record id, modality, class, D values
    printed with 9 significant digits."""
    emb = embed_dataset(model, ds)
    d = model.config.embed_dim
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        header = ["record_id", "modality", "class_id"] + [f"e{i}" for i in range(d)]
        fh.write(",".join(header) + "\n")
        for mod in ("image", "sequence"):
            rows, z = emb[mod]
            for row_pos, rec_idx in enumerate(rows):
                vals = ",".join(f"{v:.9g}" for v in z[row_pos])
                fh.write(f"{rec_idx},{mod},{ds.records[rec_idx].class_id},{vals}\n")
    os.replace(tmp, path)


def save_report(report: dict, path: str) -> None:
    """Pretty-printed EvalReport JSON with a stable key order."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
