"""Contrastive losses binding text to each non-text modality and the two
non-text modalities to each other.

Two objectives:

* text-modality loss: an infoNCE-style loss where batch members sharing
  identical (normalized) text count as extra positives. Per anchor i the
  loss is the mean negative log-probability over its positive set P(i),
  and anchors are summed (not averaged) over the batch.
* edge-modality loss: binds the two non-text modalities over the m batch
  members that form cross-modal pairs. Each anchor has a single positive
  (its partner) and the denominator is scaled by n/m so the loss scale is
  stable as the paired-subset size fluctuates across batches.

All functions return the loss value together with analytic gradients with
respect to every participating embedding matrix. Inputs must already be
row-normalized; gradients are with respect to the normalized embeddings
(the model layer owns the normalization chain rule).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    IndexOutOfRangeError,
    InvalidConfigError,
    NormViolationError,
    ShapeMismatchError,
)
from .numerics import as_matrix, log_softmax_rows

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Temperature and ablation switch for the combined objective."""

    tau: float = 0.07
    emcl_enabled: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfigError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class PositiveSets:
    """Per-anchor positive indices; always reflexive and symmetric."""

    sets: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.sets)

    def weight_matrix(self) -> np.ndarray:
        """Row-stochastic matrix W with W[i, p] = 1/|P(i)| for p in P(i)."""
        w = np.zeros((self.n, self.n))
        for i, pos in enumerate(self.sets):
            w[i, list(pos)] = 1.0 / len(pos)
        return w


@dataclass(frozen=True)
class PairSubset:
    """The m cross-modal pairs of a batch of size n.

    pairs[k] = (row into the image-side matrix, row into the sequence-side
    matrix). Indices are unique within each side.
    """

    pairs: tuple[tuple[int, int], ...]
    batch_size: int

    def __post_init__(self):
        if self.m > self.batch_size:
            raise InvalidConfigError(
                f"m={self.m} exceeds batch size n={self.batch_size}"
            )
        for side in (0, 1):
            idx = [p[side] for p in self.pairs]
            if len(set(idx)) != len(idx):
                raise InvalidConfigError("pair indices must be unique within each side")
            if any(i < 0 for i in idx):
                raise IndexOutOfRangeError("negative pair index")

    @property
    def m(self) -> int:
        return len(self.pairs)


@dataclass
class LossResult:
    """Scalar loss plus one gradient matrix per input embedding matrix."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


def build_positive_sets(text_group_ids) -> PositiveSets:
    """Group batch members with equal text-group ids into positive sets."""
    groups: dict[object, list[int]] = {}
    for i, g in enumerate(text_group_ids):
        groups.setdefault(g, []).append(i)
    sets = tuple(tuple(sorted(groups[g])) for g in text_group_ids)
    return PositiveSets(sets)


def _check_unit_rows(m: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(m, axis=1)
    dev = np.abs(norms - 1.0)
    if m.shape[0] and dev.max() > UNIT_NORM_TOL:
        bad = int(np.argmax(dev))
        raise NormViolationError(
            f"{name} row {bad} has norm {norms[bad]:.9f}, expected 1 +- {UNIT_NORM_TOL}"
        )


def tmcl_direction(anchors, targets, pos: PositiveSets, cfg: LossConfig) -> LossResult:
    """One direction of the text-modality loss (anchor rows query target rows).

    value = -sum_i 1/|P(i)| sum_{p in P(i)} log softmax(anchors_i . targets / tau)[p]

    The gradient of the per-row cross entropy with a row-stochastic target
    W is softmax - W, propagated linearly through the logit product.
    """
    a = as_matrix(anchors)
    b = as_matrix(targets)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"anchor/target shapes differ: {a.shape} vs {b.shape}")
    if pos.n != a.shape[0]:
        raise ShapeMismatchError(f"positive sets cover {pos.n} rows, batch has {a.shape[0]}")
    _check_unit_rows(a, "anchors")
    _check_unit_rows(b, "targets")

    logits = (a @ b.T) / cfg.tau
    log_probs = log_softmax_rows(logits)
    w = pos.weight_matrix()
    value = -float(np.sum(w * log_probs))

    g_logits = np.exp(log_probs) - w
    return LossResult(
        value=value,
        grads={
            "anchors": (g_logits @ b) / cfg.tau,
            "targets": (g_logits.T @ a) / cfg.tau,
        },
    )


def tmcl_symmetric(text_emb, modality_emb, pos: PositiveSets, cfg: LossConfig) -> LossResult:
    """Both directions of the text-modality loss for one bound modality."""
    fwd = tmcl_direction(text_emb, modality_emb, pos, cfg)
    rev = tmcl_direction(modality_emb, text_emb, pos, cfg)
    return LossResult(
        value=fwd.value + rev.value,
        grads={
            "text": fwd.grads["anchors"] + rev.grads["targets"],
            "modality": fwd.grads["targets"] + rev.grads["anchors"],
        },
        parts={"text_to_modality": fwd.value, "modality_to_text": rev.value},
    )


def _emcl_direction(p_anchor: np.ndarray, p_target: np.ndarray, n: int, tau: float):
    """Single-direction edge loss over already-gathered paired rows.

    Per anchor u: -s_uu + log(n/m) + logsumexp_q s_uq, with s = logits/tau.
    Returns (value, grad wrt p_anchor, grad wrt p_target).
    """
    m = p_anchor.shape[0]
    logits = (p_anchor @ p_target.T) / tau
    log_probs = log_softmax_rows(logits)
    value = -float(np.trace(log_probs)) + m * float(np.log(n / m))

    g_logits = np.exp(log_probs) - np.eye(m)
    return value, (g_logits @ p_target) / tau, (g_logits.T @ p_anchor) / tau


def emcl(image_emb, sequence_emb, pairs: PairSubset, cfg: LossConfig) -> LossResult:
    """Symmetric edge-modality loss over the paired subset of a batch.

    Returns value 0 with zero gradients when the subset is empty. The n/m
    denominator factor only shifts each anchor term by log(n/m), so the
    gradients equal those of plain infoNCE over the paired rows.
    """
    zc = as_matrix(image_emb)
    ze = as_matrix(sequence_emb)
    grads = {"image": np.zeros_like(zc), "sequence": np.zeros_like(ze)}
    if pairs.m == 0:
        return LossResult(value=0.0, grads=grads)

    rows_c = [p[0] for p in pairs.pairs]
    rows_e = [p[1] for p in pairs.pairs]
    if max(rows_c) >= zc.shape[0] or max(rows_e) >= ze.shape[0]:
        raise IndexOutOfRangeError("pair index outside embedding matrix")
    p_c = zc[rows_c]
    p_e = ze[rows_e]
    _check_unit_rows(p_c, "paired image rows")
    _check_unit_rows(p_e, "paired sequence rows")

    v_ce, g_c1, g_e1 = _emcl_direction(p_c, p_e, pairs.batch_size, cfg.tau)
    v_ec, g_e2, g_c2 = _emcl_direction(p_e, p_c, pairs.batch_size, cfg.tau)

    grads["image"][rows_c] = g_c1 + g_c2
    grads["sequence"][rows_e] = g_e1 + g_e2
    return LossResult(
        value=v_ce + v_ec,
        grads=grads,
        parts={"image_to_sequence": v_ce, "sequence_to_image": v_ec},
    )


@dataclass
class BatchEmbeddings:
    """Unit-norm embeddings of one batch, with row bookkeeping.

    text covers every batch member; the image/sequence matrices cover only
    the members that have that payload, and *_rows maps their rows back to
    batch positions.
    """

    text: np.ndarray
    image: np.ndarray
    image_rows: list[int]
    sequence: np.ndarray
    sequence_rows: list[int]


def total_loss(
    emb: BatchEmbeddings,
    group_ids,
    pairs: PairSubset,
    cfg: LossConfig,
) -> LossResult:
    """Combined objective for one batch.

    Sums the symmetric text-modality loss over both non-text modalities,
    plus the edge-modality loss when enabled. Gradients are accumulated
    into one matrix per embedding matrix (text gradients gather
    contributions from both modality sub-batches).
    """
    group_ids = list(group_ids)
    value = 0.0
    g_text = np.zeros_like(emb.text)
    g_image = np.zeros_like(emb.image)
    g_sequence = np.zeros_like(emb.sequence)
    parts = {"tmcl": 0.0, "emcl": 0.0}

    for rows, modality_emb, g_mod in (
        (emb.image_rows, emb.image, g_image),
        (emb.sequence_rows, emb.sequence, g_sequence),
    ):
        if len(rows) == 0:
            continue
        pos = build_positive_sets([group_ids[r] for r in rows])
        part = tmcl_symmetric(emb.text[rows], modality_emb, pos, cfg)
        value += part.value
        parts["tmcl"] += part.value
        g_text[rows] += part.grads["text"]
        g_mod += part.grads["modality"]

    if cfg.emcl_enabled:
        part = emcl(emb.image, emb.sequence, pairs, cfg)
        value += part.value
        parts["emcl"] = part.value
        g_image += part.grads["image"]
        g_sequence += part.grads["sequence"]

    return LossResult(
        value=value,
        grads={"text": g_text, "image": g_image, "sequence": g_sequence},
        parts=parts,
    )
