"""Deterministic training loop: epoch shuffling with pair-subset batches,
train-time augmentation, AdamW with cosine-annealed learning rate, JSONL
step logs, and per-epoch checkpoints.

The combined loss sums over anchors, so its gradient scale grows with the
batch; the loop divides by the batch size before the optimizer step to
decouple the learning rate from the batch size. Step logs record the loss
both ways (raw sum and per-sample).
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TriModalBatch, build_batch, pair_records
from .errors import (
    InvalidConfigError,
    NonFiniteError,
    NonFiniteLossError,
    ShapeMismatchError,
    ZeroRowError,
)
from .losses import LossConfig, total_loss
from .model import Model, backward_batch, forward_batch, save_model
from .seeding import stream_rng


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_max: float = 4e-4
    lr_min: float = 0.0
    weight_decay: float = 0.1
    tau: float = 0.07
    emcl_enabled: bool = True
    seed: int = 0
    augment_noise_sigma: float = 0.05
    augment_flip_prob: float = 0.5

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be >= 1")
        if not (self.lr_max > self.lr_min >= 0.0):
            raise InvalidConfigError("need lr_max > lr_min >= 0")
        if self.tau <= 0:
            raise InvalidConfigError("tau must be positive")

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, emcl_enabled=self.emcl_enabled)


def make_batches(ds: Dataset, n: int, seed: int, pairs=None) -> list[TriModalBatch]:
    """One epoch of shuffled batches; the final short batch is kept."""
    if len(ds.records) == 0:
        raise InvalidConfigError("dataset is empty")
    if pairs is None:
        pairs = pair_records(ds.records)
    order = np.random.default_rng(seed).permutation(len(ds.records)).tolist()
    return [
        build_batch(ds, order[start : start + n], pairs)
        for start in range(0, len(order), n)
    ]


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi step / total))."""
    if not 0 <= step <= total_steps:
        raise InvalidConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adamw(params: dict[str, np.ndarray]) -> AdamWState:
    return AdamWState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay step; returns the updated parameter dict.

    The decay term lr * wd * p is applied independently of the adaptive
    step, and moments are bias-corrected.
    """
    state.step += 1
    t = state.step
    out = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatchError(f"{name}: grad shape {g.shape} != param {p.shape}")
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        out[name] = p - lr * weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def augment_batch(batch: TriModalBatch, cfg: TrainConfig, rng: np.random.Generator) -> TriModalBatch:
    """Train-time augmentation: horizontal flip + noise on image grids,
    additive Gaussian noise on sequence arrays. Evaluation never calls this."""
    image = batch.image_payloads
    if image is not None:
        image = image.copy()
        flips = rng.random(image.shape[0]) < cfg.augment_flip_prob
        image[flips] = image[flips, :, ::-1]
        image += rng.normal(0.0, cfg.augment_noise_sigma, size=image.shape)
    sequence = batch.sequence_payloads
    if sequence is not None:
        sequence = sequence + rng.normal(0.0, cfg.augment_noise_sigma, size=sequence.shape)
    return TriModalBatch(
        indices=batch.indices,
        texts=batch.texts,
        group_ids=batch.group_ids,
        image_payloads=image,
        image_rows=batch.image_rows,
        sequence_payloads=sequence,
        sequence_rows=batch.sequence_rows,
        pairs=batch.pairs,
    )


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_rsum: float | None
    checkpoint_paths: dict[str, str]


def train(
    ds: Dataset,
    model: Model,
    cfg: TrainConfig,
    out_dir: str | None = None,
    val_ds: Dataset | None = None,
    val_fn=None,
) -> TrainResult:
    """Run the full loop; fully reproducible from (seed, config, dataset).

    val_fn(model, val_ds) -> float scores checkpoints (higher is better);
    when omitted with a val_ds, the text-retrieval RSUM is used. Without a
    validation set the final model is also the best one.
    """
    cfg.validate()
    if len({r.class_id for r in ds.records}) < 2:
        raise InvalidConfigError("training needs at least 2 classes")

    if val_ds is not None and val_fn is None:
        from .evaluation import modality_to_text_retrieval

        def val_fn(m, vds):
            return modality_to_text_retrieval(m, vds)["rsum"]

    pairs = pair_records(ds.records)
    params = dict(model.params)
    state = init_adamw(params)
    loss_cfg = cfg.loss_config()
    aug_rng = stream_rng(cfg.seed, "augment")

    epoch_batches = [
        make_batches(ds, cfg.batch_size, seed=int(stream_rng(cfg.seed, f"epoch-{e}").integers(2**31)), pairs=pairs)
        for e in range(cfg.epochs)
    ]
    total_steps = sum(len(b) for b in epoch_batches)

    history: list[dict] = []
    best_rsum: float | None = None
    best_epoch = -1
    paths: dict[str, str] = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    work = Model(config=model.config, params=params)
    step = 0
    for epoch, batches in enumerate(epoch_batches):
        for batch_index, batch in enumerate(batches):
            augmented = augment_batch(batch, cfg, aug_rng)
            try:
                fwd = forward_batch(work, augmented)
                res = total_loss(fwd.embeddings, batch.group_ids, batch.pairs, loss_cfg)
            except (NonFiniteError, ZeroRowError) as exc:
                raise NonFiniteLossError(
                    f"diverged at step {step} (epoch {epoch}, batch {batch_index}): {exc}",
                    step=step,
                    batch_index=batch_index,
                ) from exc
            if not math.isfinite(res.value):
                raise NonFiniteLossError(
                    f"non-finite loss at step {step} (epoch {epoch}, batch {batch_index})",
                    step=step,
                    batch_index=batch_index,
                )
            n = len(batch.indices)
            emb_grads = {k: g / n for k, g in res.grads.items()}
            grads = backward_batch(work, fwd, emb_grads)
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
            work.params = adamw_step(work.params, grads, state, lr, cfg.weight_decay)
            history.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": res.value / n,
                    "loss_sum": res.value,
                    "tmcl": res.parts.get("tmcl", 0.0),
                    "emcl": res.parts.get("emcl", 0.0),
                    "m": batch.pairs.m,
                    "n": n,
                }
            )
            step += 1

        if out_dir:
            paths["last"] = os.path.join(out_dir, "last.json")
            save_model(work, paths["last"])
        if val_ds is not None:
            score = float(val_fn(work, val_ds))
            if best_rsum is None or score > best_rsum:
                best_rsum, best_epoch = score, epoch
                if out_dir:
                    paths["best"] = os.path.join(out_dir, "best.json")
                    save_model(work, paths["best"])

    if val_ds is None:
        best_epoch = cfg.epochs - 1
        if out_dir:
            paths["best"] = os.path.join(out_dir, "best.json")
            save_model(work, paths["best"])

    if out_dir:
        log_path = os.path.join(out_dir, "log.jsonl")
        tmp = f"{log_path}.tmp"
        with open(tmp, "w") as fh:
            for entry in history:
                fh.write(json.dumps(entry) + "\n")
        os.replace(tmp, log_path)
        paths["log"] = log_path

    return TrainResult(
        model=work,
        history=history,
        best_epoch=best_epoch,
        best_rsum=best_rsum,
        checkpoint_paths=paths,
    )
