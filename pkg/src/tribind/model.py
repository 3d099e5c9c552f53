"""Toy three-modality encoders with a shared projection space.

Each modality tower is a two-layer tanh perceptron followed by a linear
projection to the shared dimension and row L2 normalization. Dense
payloads (image-like grids, sequence-like arrays) are flattened into the
perceptron; text is whitespace-tokenized, looked up in a fixed vocabulary
(id 0 reserved for out-of-vocabulary tokens) and mean-pooled into the
perceptron input.

Forward passes cache every intermediate needed to backpropagate loss
gradients (taken with respect to the normalized embeddings) into every
parameter, including the token table. All arithmetic is float64 and
parameters live in a flat name -> array dict so the optimizer and the
checkpoint format stay trivial.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaVersionMismatchError, ShapeMismatchError, ZeroRowError
from .losses import BatchEmbeddings

CHECKPOINT_SCHEMA = "tribind.checkpoint"
CHECKPOINT_VERSION = 1

MODALITIES = ("image", "sequence", "text")
OOV_ID = 0


@dataclass
class ModelConfig:
    image_shape: tuple[int, int] = (8, 8)
    sequence_shape: tuple[int, int] = (16, 4)
    hidden_dim: int = 64
    feature_dim: int = 32
    embed_dim: int = 32
    token_dim: int = 32
    vocab: list[str] = field(default_factory=list)

    def input_dim(self, modality: str) -> int:
        if modality == "image":
            return self.image_shape[0] * self.image_shape[1]
        if modality == "sequence":
            return self.sequence_shape[0] * self.sequence_shape[1]
        if modality == "text":
            return self.token_dim
        raise ValueError(f"unknown modality {modality!r}")

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "sequence_shape": list(self.sequence_shape),
            "hidden_dim": self.hidden_dim,
            "feature_dim": self.feature_dim,
            "embed_dim": self.embed_dim,
            "token_dim": self.token_dim,
            "vocab": list(self.vocab),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            image_shape=tuple(d["image_shape"]),
            sequence_shape=tuple(d["sequence_shape"]),
            hidden_dim=d["hidden_dim"],
            feature_dim=d["feature_dim"],
            embed_dim=d["embed_dim"],
            token_dim=d["token_dim"],
            vocab=list(d["vocab"]),
        )


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]


def param_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) triples; order fixes RNG consumption."""
    spec = []
    for mod in MODALITIES:
        d_in, h, f = cfg.input_dim(mod), cfg.hidden_dim, cfg.feature_dim
        spec.extend(
            [
                (f"{mod}.w1", (d_in, h), d_in),
                (f"{mod}.b1", (h,), d_in),
                (f"{mod}.w2", (h, f), h),
                (f"{mod}.b2", (f,), h),
                (f"{mod}.proj", (f, cfg.embed_dim), f),
            ]
        )
    spec.append(("text.table", (len(cfg.vocab) + 1, cfg.token_dim), cfg.token_dim))
    return spec


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], seeded."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in param_spec(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(config=cfg, params=params)


def build_vocab(texts) -> list[str]:
    """Sorted unique lowercase whitespace tokens across all texts."""
    tokens = set()
    for t in texts:
        tokens.update(t.lower().split())
    return sorted(tokens)


def tokenize(text: str, vocab_index: dict[str, int]) -> list[int]:
    """Token ids (vocab position + 1); unknown tokens map to the OOV id."""
    ids = []
    for tok in text.lower().split():
        pos = vocab_index.get(tok)
        ids.append(OOV_ID if pos is None else pos + 1)
    return ids if ids else [OOV_ID]


def vocab_index(cfg: ModelConfig) -> dict[str, int]:
    return {tok: i for i, tok in enumerate(cfg.vocab)}


@dataclass
class TowerCache:
    x: np.ndarray
    h1: np.ndarray
    r: np.ndarray
    nrm: np.ndarray
    z: np.ndarray
    token_ids: list[list[int]] | None = None


@dataclass
class ForwardResult:
    embeddings: BatchEmbeddings
    caches: dict[str, TowerCache]


def _tower_forward(model: Model, modality: str, x: np.ndarray) -> TowerCache:
    p = model.params
    a1 = x @ p[f"{modality}.w1"] + p[f"{modality}.b1"]
    h1 = np.tanh(a1)
    r = h1 @ p[f"{modality}.w2"] + p[f"{modality}.b2"]
    v = r @ p[f"{modality}.proj"]
    nrm = np.linalg.norm(v, axis=1)
    if x.shape[0] and nrm.min() < 1e-12:
        raise ZeroRowError(f"{modality} projection collapsed to zero norm")
    z = v / nrm[:, None]
    return TowerCache(x=x, h1=h1, r=r, nrm=nrm, z=z)


def _flatten_payloads(payloads: np.ndarray, expected: int, modality: str) -> np.ndarray:
    x = np.asarray(payloads, dtype=np.float64).reshape(payloads.shape[0], -1)
    if x.shape[1] != expected:
        raise ShapeMismatchError(
            f"{modality} payload flattens to {x.shape[1]}, encoder expects {expected}"
        )
    return x


def _pool_tokens(model: Model, token_ids: list[list[int]]) -> np.ndarray:
    table = model.params["text.table"]
    x = np.zeros((len(token_ids), model.config.token_dim))
    for i, ids in enumerate(token_ids):
        x[i] = table[ids].mean(axis=0)
    return x


def encode(model: Model, modality: str, payload) -> np.ndarray:
    """Raw (pre-projection) feature vector for a single sample."""
    if modality == "text":
        ids = tokenize(payload, vocab_index(model.config))
        x = _pool_tokens(model, [ids])
    else:
        arr = np.asarray(payload, dtype=np.float64)[None, ...]
        x = _flatten_payloads(arr, model.config.input_dim(modality), modality)
    p = model.params
    h1 = np.tanh(x @ p[f"{modality}.w1"] + p[f"{modality}.b1"])
    r = h1 @ p[f"{modality}.w2"] + p[f"{modality}.b2"]
    return r[0]


def project(raw, proj_weight) -> np.ndarray:
    """Linear map to the shared dimension followed by L2 normalization."""
    r = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    v = r @ proj_weight
    nrm = np.linalg.norm(v, axis=1)
    if np.any(nrm < 1e-12):
        raise ZeroRowError("projected vector has zero norm")
    out = v / nrm[:, None]
    return out[0] if np.asarray(raw).ndim == 1 else out


def forward_batch(model: Model, batch) -> ForwardResult:
    """Embed one batch; returns unit embeddings plus backprop caches.

    `batch` needs: texts (list of n strings), image_payloads (array over
    image_rows) and sequence_payloads (array over sequence_rows), where
    *_rows index into the batch. Missing modalities may be empty.
    """
    cfg = model.config
    vidx = vocab_index(cfg)
    token_ids = [tokenize(t, vidx) for t in batch.texts]
    caches = {"text": _tower_forward(model, "text", _pool_tokens(model, token_ids))}
    caches["text"].token_ids = token_ids

    for mod, payloads in (("image", batch.image_payloads), ("sequence", batch.sequence_payloads)):
        n_rows = 0 if payloads is None else len(payloads)
        if n_rows:
            x = _flatten_payloads(np.asarray(payloads, dtype=np.float64), cfg.input_dim(mod), mod)
        else:
            x = np.zeros((0, cfg.input_dim(mod)))
        caches[mod] = _tower_forward(model, mod, x)

    emb = BatchEmbeddings(
        text=caches["text"].z,
        image=caches["image"].z,
        image_rows=list(batch.image_rows),
        sequence=caches["sequence"].z,
        sequence_rows=list(batch.sequence_rows),
    )
    return ForwardResult(embeddings=emb, caches=caches)


def _tower_backward(
    model: Model, modality: str, cache: TowerCache, d_z: np.ndarray, out: dict[str, np.ndarray]
) -> None:
    p = model.params
    # through row normalization: dv = (dz - z (z . dz)) / ||v||
    radial = np.sum(cache.z * d_z, axis=1, keepdims=True)
    d_v = (d_z - cache.z * radial) / cache.nrm[:, None]
    out[f"{modality}.proj"] += cache.r.T @ d_v
    d_r = d_v @ p[f"{modality}.proj"].T
    out[f"{modality}.w2"] += cache.h1.T @ d_r
    out[f"{modality}.b2"] += d_r.sum(axis=0)
    d_h1 = d_r @ p[f"{modality}.w2"].T
    d_a1 = d_h1 * (1.0 - cache.h1**2)
    out[f"{modality}.w1"] += cache.x.T @ d_a1
    out[f"{modality}.b1"] += d_a1.sum(axis=0)
    if modality == "text":
        d_x = d_a1 @ p["text.w1"].T
        for i, ids in enumerate(cache.token_ids):
            np.add.at(out["text.table"], ids, d_x[i] / len(ids))


def backward_batch(
    model: Model, fwd: ForwardResult, emb_grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Map embedding-space gradients to parameter gradients."""
    grads = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    for mod in MODALITIES:
        d_z = emb_grads.get(mod)
        if d_z is not None and d_z.shape[0] and fwd.caches[mod].z.shape[0]:
            _tower_backward(model, mod, fwd.caches[mod], d_z, grads)
    return grads


def encode_texts(model: Model, texts) -> np.ndarray:
    """Unit embeddings for a list of texts (evaluation path)."""
    vidx = vocab_index(model.config)
    token_ids = [tokenize(t, vidx) for t in texts]
    return _tower_forward(model, "text", _pool_tokens(model, token_ids)).z


def raw_text_features(model: Model, texts) -> np.ndarray:
    """Pre-projection feature vectors for a list of texts."""
    vidx = vocab_index(model.config)
    x = _pool_tokens(model, [tokenize(t, vidx) for t in texts])
    p = model.params
    h1 = np.tanh(x @ p["text.w1"] + p["text.b1"])
    return h1 @ p["text.w2"] + p["text.b2"]


def encode_payloads(model: Model, modality: str, payloads) -> np.ndarray:
    """Unit embeddings for a stack of dense payloads (evaluation path)."""
    arr = np.asarray(payloads, dtype=np.float64)
    if arr.shape[0] == 0:
        return np.zeros((0, model.config.embed_dim))
    x = _flatten_payloads(arr, model.config.input_dim(modality), modality)
    return _tower_forward(model, modality, x).z


def save_model(model: Model, path: str) -> None:
    """Write a versioned JSON checkpoint (exact float round-trip)."""
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(model.params.items())
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_model(path: str) -> Model:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA or payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaVersionMismatchError(
            f"unsupported checkpoint header: {payload.get('schema')!r} v{payload.get('version')!r}"
        )
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return Model(config=ModelConfig.from_dict(payload["config"]), params=params)
