import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tribind.data import SyntheticConfig, generate_synthetic
from tribind.errors import (
    EmptyGalleryError,
    InsufficientSamplesError,
    LengthMismatchError,
    MissingClassSupportError,
)
from tribind.evaluation import (
    FewShotResult,
    ZeroShotSpec,
    balanced_accuracy,
    cross_modal_retrieval,
    cross_modal_zero_shot,
    export_embeddings,
    few_shot_probe,
    modality_to_text_retrieval,
    recall_at_k,
    rsum,
    zero_shot_classify,
)
from tribind.model import ModelConfig, build_vocab, init_model
from tribind.numerics import l2_normalize_rows


def unit(rows):
    return l2_normalize_rows(np.asarray(rows, dtype=np.float64))


def brute_force_recall(sims, relevant, k):
    """Independent ranking oracle: exhaustive sort by (-sim, index)."""
    hits = 0
    for i in range(sims.shape[0]):
        ranked = sorted(range(sims.shape[1]), key=lambda j: (-sims[i, j], j))
        if set(ranked[:k]) & set(relevant[i]):
            hits += 1
    return 100.0 * hits / sims.shape[0]


# ------------------------------------------------------------------ retrieval


def test_recall_self_retrieval():
    rng = np.random.default_rng(0)
    q = unit(rng.normal(size=(6, 4)))
    assert recall_at_k(q, q, [[i] for i in range(6)], 1) == 100.0


def test_recall_adversarial_distractor():
    d = 4
    queries = unit([[1, 0, 0, 0]])
    gallery = np.zeros((10, d))
    gallery[0] = [0, 1, 0, 0]  # the relevant item, orthogonal to the query
    gallery[1] = [0.9, 0, 0, np.sqrt(1 - 0.81)]
    for j in range(2, 10):
        gallery[j] = [0.5, 0.5, 0.5, 0.5]
    assert recall_at_k(queries, unit(gallery), [[0]], 1) == 0.0


def test_recall_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        q = unit(rng.normal(size=(5, 6)))
        g = unit(rng.normal(size=(8, 6)))
        relevant = [
            rng.choice(8, size=rng.integers(1, 3), replace=False).tolist() for _ in range(5)
        ]
        for k in (1, 3, 8):
            assert recall_at_k(q, g, relevant, k) == brute_force_recall(q @ g.T, relevant, k)


def test_recall_tie_breaks_to_lower_index():
    q = unit([[1.0, 0.0]])
    g = unit([[1.0, 0.0], [1.0, 0.0]])
    assert recall_at_k(q, g, [[1]], 1) == 0.0  # index 0 wins the tie
    assert recall_at_k(q, g, [[0]], 1) == 100.0


def test_recall_duplicate_ground_truth_counts_either_copy():
    q = unit([[1.0, 0.0]])
    g = unit([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert recall_at_k(q, g, [[1, 2]], 1) == 100.0


def test_recall_k_at_least_gallery_size_is_total():
    rng = np.random.default_rng(2)
    q = unit(rng.normal(size=(4, 3)))
    g = unit(rng.normal(size=(5, 3)))
    assert recall_at_k(q, g, [[0]] * 4, 5) == 100.0


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    q = unit(rng.normal(size=(4, 5)))
    g = unit(rng.normal(size=(7, 5)))
    relevant = [[int(rng.integers(0, 7))] for _ in range(4)]
    vals = [recall_at_k(q, g, relevant, k) for k in (1, 2, 4, 7)]
    assert vals == sorted(vals)


def test_recall_errors():
    q = unit([[1.0, 0.0]])
    with pytest.raises(EmptyGalleryError):
        recall_at_k(q, np.zeros((0, 2)), [[0]], 1)
    with pytest.raises(LengthMismatchError):
        recall_at_k(q, q, [], 1)
    with pytest.raises(LengthMismatchError):
        recall_at_k(q, q, [[]], 1)


def test_rsum():
    assert rsum([10.0, 20.0]) == 30.0
    assert rsum([]) == 0.0
    assert rsum([1, 2, 3, 4, 5, 6]) == 21.0


# ------------------------------------------------------------------ zero-shot


def identity_encoder(table):
    def enc(prompts):
        return np.stack([table[p] for p in prompts])

    return enc


def test_zero_shot_exact_prompt_match():
    table = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    spec = ZeroShotSpec(class_prompts=[["a"], ["b"]])
    emb = unit([[0.0, 1.0]])
    preds = zero_shot_classify(emb, spec, identity_encoder(table))
    assert preds.tolist() == [1]


def test_zero_shot_tie_goes_to_class_zero():
    table = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 0.0])}
    spec = ZeroShotSpec(class_prompts=[["a"], ["b"]])
    emb = unit([[0.0, 1.0], [1.0, 0.0]])
    preds = zero_shot_classify(emb, spec, identity_encoder(table))
    assert preds.tolist() == [0, 0]


def test_zero_shot_mean_of_identical_prompts():
    table = {
        "a1": np.array([1.0, 0.0]),
        "a2": np.array([1.0, 0.0]),
        "b": np.array([0.0, 1.0]),
    }
    multi = ZeroShotSpec(class_prompts=[["a1", "a2"], ["b"]])
    single = ZeroShotSpec(class_prompts=[["a1"], ["b"]])
    emb = unit([[0.8, 0.6], [0.1, 0.99]])
    enc = identity_encoder(table)
    assert np.array_equal(
        zero_shot_classify(emb, multi, enc), zero_shot_classify(emb, single, enc)
    )


def test_zero_shot_prompt_subsampling_deterministic():
    rng = np.random.default_rng(3)
    names = [f"p{i}" for i in range(20)]
    table = {p: rng.normal(size=3) for p in names}
    table.update({f"q{i}": rng.normal(size=3) for i in range(20)})
    spec = ZeroShotSpec(
        class_prompts=[names, [f"q{i}" for i in range(20)]], prompts_per_class_used=10
    )
    used1 = spec.used_prompts(seed=5)
    used2 = spec.used_prompts(seed=5)
    assert used1 == used2
    assert all(len(u) == 10 for u in used1)
    emb = unit(rng.normal(size=(6, 3)))
    enc = identity_encoder({k: unit(v[None])[0] for k, v in table.items()})
    p1 = zero_shot_classify(emb, spec, enc, seed=5)
    p2 = zero_shot_classify(emb, spec, enc, seed=5)
    assert np.array_equal(p1, p2)


# ------------------------------------------------------------------ few-shot


def test_few_shot_separable_is_perfect():
    emb = np.array([[1.0, 0.0]] * 10 + [[0.0, 1.0]] * 10)
    labels = [0] * 10 + [1] * 10
    for k in (1, 2, 4):
        res = few_shot_probe(emb, labels, k, repeats=5, seed=0)
        assert res.mean_balanced_accuracy == 100.0


def test_few_shot_first_repeat_independent_of_total():
    rng = np.random.default_rng(4)
    emb = unit(rng.normal(size=(40, 6)))
    labels = rng.integers(0, 2, size=40)
    one = few_shot_probe(emb, labels, 2, repeats=1, seed=7)
    many = few_shot_probe(emb, labels, 2, repeats=5, seed=7)
    assert one.per_repeat[0] == many.per_repeat[0]


def test_few_shot_insufficient_samples():
    emb = np.eye(4)
    labels = [0, 0, 0, 1]
    with pytest.raises(InsufficientSamplesError):
        few_shot_probe(emb, labels, k=2, repeats=1)


def test_few_shot_chance_level_on_shuffled_labels():
    # sigma is the spread across support sets; the SEM would understate the
    # dataset-level bias of one fixed shuffled draw
    rng = np.random.default_rng(5)
    emb = unit(rng.normal(size=(120, 8)))
    labels = rng.permutation([0, 1, 2] * 40)
    res = few_shot_probe(emb, labels, k=4, repeats=60, seed=11)
    sigma = np.std(res.per_repeat)
    assert abs(res.mean_balanced_accuracy - 100.0 / 3) <= 3 * sigma


# ------------------------------------------------------- cross-modal zero-shot


def test_cross_modal_query_equals_sole_support():
    support = unit([[1.0, 0.0], [0.0, 1.0]])
    preds = cross_modal_zero_shot(unit([[0.0, 1.0]]), support, [3, 7])
    assert preds.tolist() == [7]


def test_cross_modal_tie_goes_to_class_zero():
    support = unit([[1.0, 0.0], [0.0, 1.0]])
    query = unit([[1.0, 1.0]])
    assert cross_modal_zero_shot(query, support, [0, 1]).tolist() == [0]


def test_cross_modal_matches_brute_force_prototypes():
    rng = np.random.default_rng(6)
    support = unit(rng.normal(size=(12, 5)))
    labels = rng.integers(0, 3, size=12)
    queries = unit(rng.normal(size=(9, 5)))
    preds = cross_modal_zero_shot(queries, support, labels)

    classes = sorted(set(labels.tolist()))
    protos = unit([support[labels == c].mean(axis=0) for c in classes])
    expected = []
    for q in queries:
        dists = [1.0 - float(q @ p) for p in protos]
        expected.append(classes[int(np.argmin(dists))])
    assert preds.tolist() == expected


def test_cross_modal_1nn_mode():
    support = unit([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
    labels = [0, 1, 1]
    queries = unit([[0.9, 0.1], [0.1, 0.9]])
    preds = cross_modal_zero_shot(queries, support, labels, mode="1nn")
    assert preds.tolist() == [0, 1]


def test_cross_modal_empty_support():
    with pytest.raises(MissingClassSupportError):
        cross_modal_zero_shot(unit([[1.0, 0.0]]), np.zeros((0, 2)), [])


# ------------------------------------------------------------------ metrics


def test_balanced_accuracy_perfect():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2]) == 100.0


def test_balanced_accuracy_example():
    assert balanced_accuracy([0, 1, 1, 1], [0, 0, 1, 1]) == 75.0


def test_balanced_accuracy_single_class():
    assert balanced_accuracy([4, 4], [4, 4]) == 100.0


def test_balanced_accuracy_against_direct_computation():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 4, size=60)
    preds = rng.integers(0, 4, size=60)
    direct = np.mean(
        [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    )
    assert balanced_accuracy(preds, labels) == pytest.approx(100 * direct, abs=1e-12)


def test_balanced_accuracy_length_mismatch():
    with pytest.raises(LengthMismatchError):
        balanced_accuracy([0, 1], [0])


# ------------------------------------------------------------- orchestration


@pytest.fixture(scope="module")
def tiny_setup():
    ds = generate_synthetic(
        SyntheticConfig(
            num_records=24,
            num_classes=2,
            pairing_rate=0.5,
            image_shape=(4, 4),
            sequence_shape=(6, 2),
            seed=13,
        )
    )
    cfg = ModelConfig(
        image_shape=(4, 4),
        sequence_shape=(6, 2),
        hidden_dim=12,
        feature_dim=6,
        embed_dim=6,
        token_dim=6,
        vocab=build_vocab([r.text for r in ds.records]),
    )
    return ds, init_model(cfg, seed=21)


def test_modality_to_text_report_shape(tiny_setup):
    ds, model = tiny_setup
    report = modality_to_text_retrieval(model, ds)
    assert set(report) == {"image_to_text", "sequence_to_text", "rsum"}
    for mod in ("image_to_text", "sequence_to_text"):
        assert set(report[mod]) == {"recall@1", "recall@5", "recall@10"}
        vals = [report[mod][f"recall@{k}"] for k in (1, 5, 10)]
        assert vals == sorted(vals)
        assert all(0 <= v <= 100 for v in vals)
    assert report["rsum"] == pytest.approx(
        sum(report["image_to_text"].values()) + sum(report["sequence_to_text"].values())
    )


def test_cross_modal_retrieval_report(tiny_setup):
    ds, model = tiny_setup
    report = cross_modal_retrieval(model, ds)
    assert report["num_pairs"] == 12
    assert set(report["image_to_sequence"]) == {"recall@1", "recall@5", "recall@10"}


def test_export_embeddings_csv(tiny_setup, tmp_path):
    ds, model = tiny_setup
    path = tmp_path / "emb.csv"
    export_embeddings(ds, model, str(path))
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[:3] == ["record_id", "modality", "class_id"]
    n_img = sum(1 for r in ds.records if r.image_payload is not None)
    n_seq = sum(1 for r in ds.records if r.sequence_payload is not None)
    assert len(body) == n_img + n_seq
    for row in body:
        vec = np.array([float(v) for v in row[3:]])
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-6


def test_export_two_paired_records_four_rows(tmp_path):
    ds = generate_synthetic(
        SyntheticConfig(
            num_records=2,
            num_classes=2,
            pairing_rate=1.0,
            image_shape=(4, 4),
            sequence_shape=(6, 2),
            seed=3,
        )
    )
    cfg = ModelConfig(
        image_shape=(4, 4),
        sequence_shape=(6, 2),
        hidden_dim=8,
        feature_dim=4,
        embed_dim=4,
        token_dim=4,
        vocab=build_vocab([r.text for r in ds.records]),
    )
    model = init_model(cfg, seed=2)
    path = tmp_path / "e.csv"
    export_embeddings(ds, model, str(path))
    assert len(path.read_text().strip().split("\n")) == 1 + 4
