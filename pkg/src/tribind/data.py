"""Synthetic tri-modal records, pairing, text labeling, prompt generation,
and dataset file I/O.

A record is one synthetic patient case: up to two dense payloads (an
image-like grid and a sequence-like array), a short text, ids, per-payload
timestamps, and optional binary outcomes. Records with both payloads and
close timestamps form the cross-modal pairs that the edge loss consumes.
"""

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources as importlib_resources

import numpy as np

from .errors import (
    InvalidConfigError,
    MissingFieldError,
    SchemaVersionMismatchError,
)
from .losses import PairSubset

DATASET_SCHEMA = "tribind.dataset"
DATASET_VERSION = 1

DEFAULT_PROMPT_TEMPLATE = "This ECG shows {LABEL}."

DEFAULT_CLASS_NAMES = [
    "normal sinus rhythm",
    "hypertrophy",
    "myocardial infarction",
    "stt changes",
    "conduction disturbance",
    "atrial fibrillation",
    "bundle branch block",
    "pacemaker rhythm",
]

EXCLUDED_DISALLOWED = "disallowed_content"
EXCLUDED_NO_KEYWORD = "no_keyword"


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace; the duplicate-text equality key."""
    return " ".join(text.lower().split())


def truncate_text(text: str, max_words: int = 100) -> str:
    """First `max_words` whitespace tokens, spacing collapsed."""
    return " ".join(text.split()[:max_words])


# ------------------------------------------------------------------ records


@dataclass
class Record:
    subject_id: str
    text: str
    class_id: int
    visit_id: str | None = None
    image_payload: np.ndarray | None = None
    sequence_payload: np.ndarray | None = None
    image_time: int | None = None
    sequence_time: int | None = None
    outcome_readmit: bool | None = None
    outcome_mortality: bool | None = None

    def validate(self) -> None:
        if self.image_payload is None and self.sequence_payload is None:
            raise ValueError("record must carry at least one modality payload")
        if not self.text:
            raise ValueError("record text must be non-empty")
        if self.image_payload is not None and self.image_time is None:
            raise ValueError("image payload requires image_time")
        if self.sequence_payload is not None and self.sequence_time is None:
            raise ValueError("sequence payload requires sequence_time")


@dataclass
class Dataset:
    records: list[Record]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.records)


def records_equal(a: Record, b: Record) -> bool:
    def arr_eq(x, y):
        if x is None or y is None:
            return x is None and y is None
        return x.shape == y.shape and np.array_equal(x, y)

    return (
        a.subject_id == b.subject_id
        and a.visit_id == b.visit_id
        and a.text == b.text
        and a.class_id == b.class_id
        and a.image_time == b.image_time
        and a.sequence_time == b.sequence_time
        and a.outcome_readmit == b.outcome_readmit
        and a.outcome_mortality == b.outcome_mortality
        and arr_eq(a.image_payload, b.image_payload)
        and arr_eq(a.sequence_payload, b.sequence_payload)
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    return (
        a.class_names == b.class_names
        and len(a.records) == len(b.records)
        and all(records_equal(x, y) for x, y in zip(a.records, b.records))
    )


def split_dataset(ds: Dataset, holdout_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, holdout)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise InvalidConfigError("holdout_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds.records))
    cut = len(ds.records) - max(1, int(round(holdout_fraction * len(ds.records))))
    take = lambda idx: Dataset([ds.records[i] for i in idx], list(ds.class_names))
    return take(order[:cut]), take(order[cut:])


# ------------------------------------------------------- synthetic generation


@dataclass
class SyntheticConfig:
    num_records: int = 2000
    num_classes: int = 4
    pairing_rate: float = 0.25
    duplicate_text_rate: float = 0.3
    noise_sigma: float = 1.0
    image_shape: tuple[int, int] = (8, 8)
    sequence_shape: tuple[int, int] = (16, 4)
    payload_variants: int = 6
    variant_signal: float = 1.0
    outcome_signal: float = 1.0
    neutral_text_rate: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_records < 1 or self.num_classes < 1:
            raise InvalidConfigError("num_records and num_classes must be >= 1")
        for name in ("pairing_rate", "duplicate_text_rate", "neutral_text_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be >= 0")
        if self.payload_variants < 1:
            raise InvalidConfigError("payload_variants must be >= 1")
        if min(*self.image_shape, *self.sequence_shape) < 1:
            raise InvalidConfigError("payload dims must be positive")


def class_name(c: int) -> str:
    if c < len(DEFAULT_CLASS_NAMES):
        return DEFAULT_CLASS_NAMES[c]
    return f"condition {c}"


def _prompt_pool(name: str, size: int, neutral_rate: float = 0.0) -> list[str]:
    """Per-class text pool: class-naming prompts interleaved with generic
    class-neutral reports.

    Neutral entries mimic unlabelable generic reports and are shared
    verbatim across classes, so duplicate-text positive sets can span
    classes just as identical free-text reports can span labels. Entry 0
    is always the plain class prompt, which keeps a single-text pool
    (duplicate rate 1) class-distinctive.
    """
    pool = []
    for k in range(size):
        if k > 0 and math.floor((k + 1) * neutral_rate) > math.floor(k * neutral_rate):
            pool.append(f"Tracing on file. Reading index {k} for review.")
        elif k == 0:
            pool.append(f"This ECG shows {name}.")
        else:
            pool.append(f"This ECG shows {name}. Reading index {k}.")
    return pool


PAIR_WINDOW_HOURS = 24.0
_RECORD_SPACING_S = 7 * 24 * 3600  # keep distinct records far outside the window
_EPOCH_BASE_S = 1_700_000_000


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Build a balanced synthetic tri-modal dataset.

    Payloads are per-class templates plus Gaussian noise. Each record also
    draws a hidden variant id and two hidden outcome bits that shift both
    payload templates by per-class offsets: payload-level structure the
    class-prompt text never reveals, so cross-modal binding has something
    to learn beyond the text anchor, and outcomes stay predictable from
    payloads but not from text. Exactly floor(pairing_rate * N) records
    carry both payloads with timestamps inside the pairing window; every
    other record carries one payload, alternating sides. Texts come from
    per-class pools sized to (1 - duplicate_text_rate) of the class
    cohort, so rate 1 collapses a class to a single shared text and rate 0
    keeps every text unique within its class. A neutral_text_rate fraction
    of each pool consists of generic reports shared verbatim across
    classes (duplicate-text positives may therefore span classes).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, c = cfg.num_records, cfg.num_classes

    class_ids = [i % c for i in range(n)]
    per_class = [class_ids.count(k) for k in range(c)]

    templates_img = rng.normal(0.0, 1.0, size=(c, *cfg.image_shape))
    templates_seq = rng.normal(0.0, 1.0, size=(c, *cfg.sequence_shape))
    s = cfg.outcome_signal
    offsets_img = rng.normal(0.0, s, size=(2, c, *cfg.image_shape))
    offsets_seq = rng.normal(0.0, s, size=(2, c, *cfg.sequence_shape))
    v = cfg.payload_variants
    variants_img = rng.normal(0.0, cfg.variant_signal, size=(v, c, *cfg.image_shape))
    variants_seq = rng.normal(0.0, cfg.variant_signal, size=(v, c, *cfg.sequence_shape))

    pools = []
    for k in range(c):
        keep = max(1, round(per_class[k] * (1.0 - cfg.duplicate_text_rate)))
        pools.append(_prompt_pool(class_name(k), keep, cfg.neutral_text_rate))

    paired = set(rng.permutation(n)[: math.floor(cfg.pairing_rate * n)].tolist())
    outcome_bits = rng.integers(0, 2, size=(n, 2))
    variant_ids = rng.integers(0, v, size=n)

    records = []
    seen_in_class = [0] * c
    unpaired_count = 0
    for i in range(n):
        k = class_ids[i]
        text = pools[k][seen_in_class[k] % len(pools[k])]
        seen_in_class[k] += 1

        b_readmit, b_mort = int(outcome_bits[i, 0]), int(outcome_bits[i, 1])
        var = int(variant_ids[i])
        img = (
            templates_img[k]
            + variants_img[var, k]
            + b_readmit * offsets_img[0, k]
            + b_mort * offsets_img[1, k]
            + rng.normal(0.0, cfg.noise_sigma, size=cfg.image_shape)
        )
        seq = (
            templates_seq[k]
            + variants_seq[var, k]
            + b_readmit * offsets_seq[0, k]
            + b_mort * offsets_seq[1, k]
            + rng.normal(0.0, cfg.noise_sigma, size=cfg.sequence_shape)
        )

        t0 = _EPOCH_BASE_S + i * _RECORD_SPACING_S
        rec = Record(
            subject_id=f"subj-{i:05d}",
            visit_id=f"visit-{i:05d}",
            text=text,
            class_id=k,
            outcome_readmit=bool(b_readmit),
            outcome_mortality=bool(b_mort),
        )
        if i in paired:
            rec.image_payload, rec.image_time = img, t0
            rec.sequence_payload, rec.sequence_time = seq, t0 + 3600
        elif unpaired_count % 2 == 0:
            rec.image_payload, rec.image_time = img, t0
            unpaired_count += 1
        else:
            rec.sequence_payload, rec.sequence_time = seq, t0
            unpaired_count += 1
        rec.validate()
        records.append(rec)

    return Dataset(records=records, class_names=[class_name(k) for k in range(c)])


# ------------------------------------------------------------------- pairing


def pair_records(records, window_hours: float = PAIR_WINDOW_HOURS) -> PairSubset:
    """Greedy earliest-time cross-modal pairing over a record list.

    A pair (i, j) means record i supplies the image payload and record j
    the sequence payload (i == j when one record carries both). Records
    pair when their visit ids match, or else when subject ids match and
    the two recording times lie within the window. Each record joins at
    most one pair. Candidates are ranked by recording times and content
    keys, so the resulting pair set is independent of record order.
    """
    image_side = [
        i
        for i, r in enumerate(records)
        if r.image_payload is not None and r.image_time is not None
    ]
    sequence_side = [
        j
        for j, r in enumerate(records)
        if r.sequence_payload is not None and r.sequence_time is not None
    ]

    by_visit: dict[str, tuple[list[int], list[int]]] = {}
    by_subject: dict[str, tuple[list[int], list[int]]] = {}
    for i in image_side:
        r = records[i]
        if r.visit_id is not None:
            by_visit.setdefault(r.visit_id, ([], []))[0].append(i)
        by_subject.setdefault(r.subject_id, ([], []))[0].append(i)
    for j in sequence_side:
        r = records[j]
        if r.visit_id is not None:
            by_visit.setdefault(r.visit_id, ([], []))[1].append(j)
        by_subject.setdefault(r.subject_id, ([], []))[1].append(j)

    window_s = window_hours * 3600.0
    candidates: set[tuple[int, int]] = set()
    for imgs, seqs in by_visit.values():
        for i in imgs:
            for j in seqs:
                if records[i].visit_id == records[j].visit_id:
                    candidates.add((i, j))
    for imgs, seqs in by_subject.values():
        for i in imgs:
            for j in seqs:
                if abs(records[i].image_time - records[j].sequence_time) <= window_s:
                    candidates.add((i, j))

    def sort_key(pair):
        i, j = pair
        ri, rj = records[i], records[j]
        return (
            ri.image_time,
            rj.sequence_time,
            ri.subject_id,
            rj.subject_id,
            ri.visit_id or "",
            rj.visit_id or "",
        )

    used: set[int] = set()
    chosen = []
    for i, j in sorted(candidates, key=sort_key):
        if i in used or j in used:
            continue
        chosen.append((i, j))
        used.add(i)
        used.add(j)
    return PairSubset(tuple(chosen), batch_size=len(records))


# ------------------------------------------------------------------ batching


@dataclass
class TriModalBatch:
    """One training batch: payload stacks, duplicate-text groups, pairs.

    image_rows / sequence_rows list the batch positions that own each
    payload stack row; pairs index into those row spaces and carry the
    full batch size n for the edge-loss scale factor.
    """

    indices: list[int]
    texts: list[str]
    group_ids: list[int]
    image_payloads: np.ndarray | None
    image_rows: list[int]
    sequence_payloads: np.ndarray | None
    sequence_rows: list[int]
    pairs: PairSubset


def text_group_ids(texts) -> list[int]:
    """Batch-local group ids under normalized-text equality."""
    seen: dict[str, int] = {}
    ids = []
    for t in texts:
        key = normalize_text(t)
        ids.append(seen.setdefault(key, len(seen)))
    return ids


def build_batch(ds: Dataset, indices, dataset_pairs: PairSubset) -> TriModalBatch:
    """Bundle the given records into a batch, keeping only the pairs whose
    two sides both landed in this batch."""
    indices = list(indices)
    position = {rec_idx: pos for pos, rec_idx in enumerate(indices)}
    texts = [ds.records[i].text for i in indices]

    image_rows, image_stack = [], []
    sequence_rows, sequence_stack = [], []
    image_row_of: dict[int, int] = {}
    sequence_row_of: dict[int, int] = {}
    for pos, rec_idx in enumerate(indices):
        r = ds.records[rec_idx]
        if r.image_payload is not None:
            image_row_of[pos] = len(image_rows)
            image_rows.append(pos)
            image_stack.append(r.image_payload)
        if r.sequence_payload is not None:
            sequence_row_of[pos] = len(sequence_rows)
            sequence_rows.append(pos)
            sequence_stack.append(r.sequence_payload)

    batch_pairs = []
    for i, j in dataset_pairs.pairs:
        if i in position and j in position:
            batch_pairs.append((image_row_of[position[i]], sequence_row_of[position[j]]))

    return TriModalBatch(
        indices=indices,
        texts=texts,
        group_ids=text_group_ids(texts),
        image_payloads=np.stack(image_stack) if image_stack else None,
        image_rows=image_rows,
        sequence_payloads=np.stack(sequence_stack) if sequence_stack else None,
        sequence_rows=sequence_rows,
        pairs=PairSubset(tuple(batch_pairs), batch_size=len(indices)),
    )


# ------------------------------------------------------------------ labeling


@dataclass(frozen=True)
class LabelRuleSet:
    """Ordered class keyword lists plus a global disallowed-content list."""

    classes: tuple[tuple[str, tuple[str, ...]], ...]
    disallowed: tuple[str, ...]

    def __post_init__(self):
        for name, keywords in self.classes:
            if not keywords:
                raise InvalidConfigError(f"class {name!r} has an empty keyword list")


@dataclass(frozen=True)
class Excluded:
    """Non-label outcome of rule-based labeling."""

    reason: str


def load_rules(path: str) -> LabelRuleSet:
    with open(path) as fh:
        raw = json.load(fh)
    return LabelRuleSet(
        classes=tuple((c["name"], tuple(c["keywords"])) for c in raw["classes"]),
        disallowed=tuple(raw["disallowed"]),
    )


def default_rules() -> LabelRuleSet:
    ref = importlib_resources.files("tribind.resources") / "label_rules.json"
    with importlib_resources.as_file(ref) as path:
        return load_rules(str(path))


def label_text(text: str, rules: LabelRuleSet) -> str | Excluded:
    """First matching class in rule order, case-insensitive substring.

    Disallowed content wins over any keyword hit; texts matching no
    keyword are excluded rather than guessed.
    """
    hay = text.lower()
    if any(phrase.lower() in hay for phrase in rules.disallowed):
        return Excluded(EXCLUDED_DISALLOWED)
    for name, keywords in rules.classes:
        if any(kw.lower() in hay for kw in keywords):
            return name
    return Excluded(EXCLUDED_NO_KEYWORD)


# ------------------------------------------------------------------- prompts


def make_prompt(template: str, label: str) -> str:
    """Substitute {LABEL} into a prompt template, byte for byte."""
    if not label:
        raise MissingFieldError("prompt label is empty")
    if "{LABEL}" not in template:
        raise MissingFieldError("template has no {LABEL} placeholder")
    return template.replace("{LABEL}", label)


def generate_ecg_report(reports) -> str:
    """Fold machine report lines into the standard generated-text format."""
    reports = [r for r in reports]
    if not reports:
        raise MissingFieldError("at least one report line is required")
    head = f"ECG presents {reports[0]}."
    if len(reports) == 1:
        return head
    return f"{head} Additional findings include the following: {', '.join(reports[1:])}."


def generate_demographics(fields: dict) -> str:
    """Fold admission fields into the standard generated-text format."""
    required = ("gender", "anchor_age", "admission_type", "admission_location")
    missing = [k for k in required if fields.get(k) in (None, "")]
    if missing:
        raise MissingFieldError(f"missing demographics fields: {', '.join(missing)}")
    return (
        f"{fields['gender']} patient, who is at the age of {fields['anchor_age']}, "
        f"was admitted as {fields['admission_type']}. "
        f"Location: {fields['admission_location']}."
    )


# ------------------------------------------------------------------ file I/O


def _record_to_dict(r: Record) -> dict:
    return {
        "subject_id": r.subject_id,
        "visit_id": r.visit_id,
        "text": r.text,
        "class_id": r.class_id,
        "image_payload": None if r.image_payload is None else r.image_payload.tolist(),
        "sequence_payload": None
        if r.sequence_payload is None
        else r.sequence_payload.tolist(),
        "image_time": r.image_time,
        "sequence_time": r.sequence_time,
        "outcome_readmit": r.outcome_readmit,
        "outcome_mortality": r.outcome_mortality,
    }


def _record_from_dict(d: dict) -> Record:
    return Record(
        subject_id=d["subject_id"],
        visit_id=d["visit_id"],
        text=d["text"],
        class_id=d["class_id"],
        image_payload=None
        if d["image_payload"] is None
        else np.array(d["image_payload"], dtype=np.float64),
        sequence_payload=None
        if d["sequence_payload"] is None
        else np.array(d["sequence_payload"], dtype=np.float64),
        image_time=d["image_time"],
        sequence_time=d["sequence_time"],
        outcome_readmit=d["outcome_readmit"],
        outcome_mortality=d["outcome_mortality"],
    )


def save_dataset(ds: Dataset, path: str) -> None:
    """JSON-lines file: one version header line, then one record per line."""
    header = {
        "schema": DATASET_SCHEMA,
        "version": DATASET_VERSION,
        "class_names": ds.class_names,
        "num_records": len(ds.records),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in ds.records:
            fh.write(json.dumps(_record_to_dict(r)) + "\n")
    os.replace(tmp, path)


def load_dataset(path: str) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise SchemaVersionMismatchError(f"unreadable dataset header: {exc}") from exc
        if not isinstance(header, dict) or header.get("schema") != DATASET_SCHEMA:
            raise SchemaVersionMismatchError(f"not a {DATASET_SCHEMA} file: {path}")
        if header.get("version") != DATASET_VERSION:
            raise SchemaVersionMismatchError(
                f"unsupported dataset version {header.get('version')!r}"
            )
        records = [_record_from_dict(json.loads(line)) for line in fh if line.strip()]
    return Dataset(records=records, class_names=list(header["class_names"]))
