"""Outcome prediction from frozen encoders: text features pass through a
small trainable classifier, optionally joined by the frozen non-text
embeddings via a trainable linear projection per modality.

The encoders are never updated here. Records lacking a modality
contribute a learned missing-token vector in place of the projected
embedding, so the fused input width is constant.
"""

import copy
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InvalidConfigError, MissingOutcomeError, ShapeMismatchError
from .model import Model, encode_payloads, raw_text_features
from .seeding import stream_rng
from .train import adamw_step, init_adamw

MODES = ("text_only", "text_plus_embeddings")
OUTCOMES = ("readmit", "mortality")


@dataclass
class FusionConfig:
    projection_dim: int = 16
    hidden_dim: int = 32
    epochs: int = 300
    lr: float = 0.02
    seed: int = 0
    mode: str = "text_plus_embeddings"
    holdout_fraction: float = 0.2

    def validate(self) -> None:
        if self.projection_dim < 1 or self.hidden_dim < 1:
            raise InvalidConfigError("fusion dims must be positive")
        if self.mode not in MODES:
            raise InvalidConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise InvalidConfigError("holdout_fraction must lie in (0, 1)")


def init_fusion_params(text_dim: int, embed_dim: int, cfg: FusionConfig) -> dict[str, np.ndarray]:
    rng = stream_rng(cfg.seed, "fusion-init")
    p_dim, h = cfg.projection_dim, cfg.hidden_dim
    fused = text_dim + (2 * p_dim if cfg.mode == "text_plus_embeddings" else 0)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "proj.image": uniform((embed_dim, p_dim), embed_dim),
        "proj.sequence": uniform((embed_dim, p_dim), embed_dim),
        "miss.image": np.zeros(p_dim),
        "miss.sequence": np.zeros(p_dim),
        "clf.w1": uniform((fused, h), fused),
        "clf.b1": np.zeros(h),
        "clf.w2": uniform((h, 1), h),
        "clf.b2": np.zeros(1),
    }
    return params


def build_fusion_input(
    text_features: np.ndarray,
    image_emb: np.ndarray | None,
    sequence_emb: np.ndarray | None,
    params: dict[str, np.ndarray],
    mode: str = "text_plus_embeddings",
) -> np.ndarray:
    """Fused input vector for one record; absent modalities contribute the
    learned missing-token vector."""
    text_features = np.asarray(text_features, dtype=np.float64)
    if mode == "text_only":
        return text_features
    segments = [text_features]
    for emb, key in ((image_emb, "image"), (sequence_emb, "sequence")):
        if emb is None:
            segments.append(params[f"miss.{key}"])
        else:
            emb = np.asarray(emb, dtype=np.float64)
            w = params[f"proj.{key}"]
            if emb.shape[-1] != w.shape[0]:
                raise ShapeMismatchError(
                    f"{key} embedding dim {emb.shape[-1]} != projection input {w.shape[0]}"
                )
            segments.append(emb @ w)
    return np.concatenate(segments)


def _classifier_forward(fused: np.ndarray, params: dict[str, np.ndarray]):
    h = np.tanh(fused @ params["clf.w1"] + params["clf.b1"])
    logits = (h @ params["clf.w2"] + params["clf.b2"]).ravel()
    return h, logits


def classifier_logits(fused: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    return _classifier_forward(np.atleast_2d(fused), params)[1]


@dataclass
class FusionResult:
    params: dict[str, np.ndarray]
    balanced_accuracy: float
    mode: str
    outcome: str
    train_size: int
    holdout_size: int


def _outcome_labels(ds: Dataset, outcome: str) -> np.ndarray:
    if outcome not in OUTCOMES:
        raise InvalidConfigError(f"outcome must be one of {OUTCOMES}")
    attr = f"outcome_{outcome}"
    vals = [getattr(r, attr) for r in ds.records]
    if any(v is None for v in vals):
        raise MissingOutcomeError(f"records without {attr} label")
    return np.array([1.0 if v else 0.0 for v in vals])


def _frozen_features(model: Model, ds: Dataset):
    """Text features plus masked modality embeddings for every record."""
    text = raw_text_features(model, [r.text for r in ds.records])
    d = model.config.embed_dim
    n = len(ds.records)
    emb = {
        "image": np.zeros((n, d)),
        "sequence": np.zeros((n, d)),
    }
    mask = {"image": np.zeros(n, dtype=bool), "sequence": np.zeros(n, dtype=bool)}
    for key, payload_attr in (("image", "image_payload"), ("sequence", "sequence_payload")):
        rows = [i for i, r in enumerate(ds.records) if getattr(r, payload_attr) is not None]
        if rows:
            stack = np.stack([getattr(ds.records[i], payload_attr) for i in rows])
            emb[key][rows] = encode_payloads(model, key, stack)
            mask[key][rows] = True
    return text, emb, mask


def _fused_matrix(text, emb, mask, params, mode):
    if mode == "text_only":
        return text
    parts = [text]
    for key in ("image", "sequence"):
        u = np.where(
            mask[key][:, None], emb[key] @ params[f"proj.{key}"], params[f"miss.{key}"]
        )
        parts.append(u)
    return np.concatenate(parts, axis=1)


def train_fusion(
    ds: Dataset, frozen_model: Model, cfg: FusionConfig, outcome: str = "readmit"
) -> FusionResult:
    """Fit the projection + classifier on a fixed split; encoders stay frozen.

    Full-batch AdamW on the logistic loss; reports balanced accuracy on
    the held-out fraction.
    """
    cfg.validate()
    y = _outcome_labels(ds, outcome)
    text, emb, mask = _frozen_features(frozen_model, ds)

    n = len(ds.records)
    order = stream_rng(cfg.seed, "fusion-split").permutation(n)
    holdout = max(1, int(round(cfg.holdout_fraction * n)))
    test_idx, train_idx = order[:holdout], order[holdout:]

    params = init_fusion_params(text.shape[1], frozen_model.config.embed_dim, cfg)
    state = init_adamw(params)
    text_dim = text.shape[1]
    p_dim = cfg.projection_dim

    y_tr = y[train_idx]
    for _ in range(cfg.epochs):
        fused = _fused_matrix(
            text[train_idx], {k: v[train_idx] for k, v in emb.items()},
            {k: v[train_idx] for k, v in mask.items()}, params, cfg.mode,
        )
        h, logits = _classifier_forward(fused, params)
        p = 1.0 / (1.0 + np.exp(-logits))
        d_logit = (p - y_tr)[:, None] / len(train_idx)

        grads = {k: np.zeros_like(v) for k, v in params.items()}
        grads["clf.w2"] = h.T @ d_logit
        grads["clf.b2"] = d_logit.sum(axis=0)
        d_h = d_logit @ params["clf.w2"].T
        d_a = d_h * (1.0 - h**2)
        grads["clf.w1"] = fused.T @ d_a
        grads["clf.b1"] = d_a.sum(axis=0)

        if cfg.mode == "text_plus_embeddings":
            d_fused = d_a @ params["clf.w1"].T
            for seg, key in enumerate(("image", "sequence")):
                sl = slice(text_dim + seg * p_dim, text_dim + (seg + 1) * p_dim)
                d_u = d_fused[:, sl]
                present = mask[key][train_idx]
                e = emb[key][train_idx][present]
                grads[f"proj.{key}"] = e.T @ d_u[present]
                grads[f"miss.{key}"] = d_u[~present].sum(axis=0)

        params = adamw_step(params, grads, state, lr=cfg.lr, weight_decay=0.0)

    fused_te = _fused_matrix(
        text[test_idx], {k: v[test_idx] for k, v in emb.items()},
        {k: v[test_idx] for k, v in mask.items()}, params, cfg.mode,
    )
    preds = (classifier_logits(fused_te, params) > 0).astype(int)
    labels = y[test_idx].astype(int)
    per_class = [float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)]
    acc = 100.0 * float(np.mean(per_class))

    return FusionResult(
        params=copy.deepcopy(params),
        balanced_accuracy=acc,
        mode=cfg.mode,
        outcome=outcome,
        train_size=len(train_idx),
        holdout_size=len(test_idx),
    )
