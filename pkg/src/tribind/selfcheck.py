"""Built-in verification suite: gradient oracles, reduction identities,
closed-form spot values, and numeric-stability properties.

The CLI `selfcheck` command runs this and exits nonzero on any failure,
giving CI a single cheap gate over the numerical core.
"""

import math

import numpy as np

from .losses import (
    LossConfig,
    PairSubset,
    build_positive_sets,
    emcl,
    tmcl_direction,
    tmcl_symmetric,
)
from .numerics import (
    finite_diff_gradient,
    l2_normalize_rows,
    log_softmax_rows,
    relative_error,
)

# perturbations must stay inside the unit-norm guard of the losses
FD_EPS = 5e-7
GRAD_TOL = 1e-5


def _unit(rng, n, d):
    return l2_normalize_rows(rng.normal(size=(n, d)))


def _reference_infonce(anchors, targets, tau):
    n = anchors.shape[0]
    total = 0.0
    for i in range(n):
        logits = np.array([float(anchors[i] @ targets[l]) / tau for l in range(n)])
        shifted = logits - logits.max()
        total -= shifted[i] - math.log(float(np.exp(shifted).sum()))
    return total


def _grad_check(value_fn, analytic, x0) -> float:
    fd = finite_diff_gradient(value_fn, x0.ravel(), eps=FD_EPS)
    return relative_error(analytic.ravel(), fd)


def check_gradients(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for n in (2, 3, 5):
        for duplicates in (False, True):
            d = 6
            a = _unit(rng, n, d)
            b = _unit(rng, n, d)
            groups = [0, 0] + list(range(1, n - 1)) if duplicates and n > 1 else list(range(n))
            pos = build_positive_sets(groups[:n])
            cfg = LossConfig(tau=0.07)
            res = tmcl_direction(a, b, pos, cfg)
            worst = max(
                worst,
                _grad_check(lambda v: tmcl_direction(v.reshape(n, d), b, pos, cfg).value,
                            res.grads["anchors"], a),
                _grad_check(lambda v: tmcl_direction(a, v.reshape(n, d), pos, cfg).value,
                            res.grads["targets"], b),
            )
            sym = tmcl_symmetric(a, b, pos, cfg)
            worst = max(
                worst,
                _grad_check(lambda v: tmcl_symmetric(v.reshape(n, d), b, pos, cfg).value,
                            sym.grads["text"], a),
            )
            for m in (0, 1, n):
                pairs = PairSubset(tuple((i, i) for i in range(m)), batch_size=n)
                e = emcl(a, b, pairs, cfg)
                worst = max(
                    worst,
                    _grad_check(lambda v: emcl(v.reshape(n, d), b, pairs, cfg).value,
                                e.grads["image"], a),
                )
                cases += 1
            cases += 3
    ok = worst < GRAD_TOL
    return ok, f"{cases} gradient checks, worst relative error {worst:.2e}"


def check_reductions(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 1)
    n, d = 5, 8
    a, b = _unit(rng, n, d), _unit(rng, n, d)
    pos = build_positive_sets(range(n))
    cfg = LossConfig(tau=0.07)
    err1 = abs(tmcl_direction(a, b, pos, cfg).value - _reference_infonce(a, b, 0.07))
    pairs = PairSubset(tuple((i, i) for i in range(n)), batch_size=n)
    res = emcl(a, b, pairs, cfg)
    err2 = abs(res.parts["image_to_sequence"] - _reference_infonce(a, b, 0.07))
    empty = emcl(a, b, PairSubset((), batch_size=n), cfg)
    ok = err1 < 1e-12 and err2 < 1e-12 and empty.value == 0.0
    return ok, f"infoNCE deviations {err1:.1e} / {err2:.1e}, empty-subset value {empty.value}"


def check_spot_values(seed: int) -> tuple[bool, str]:
    del seed
    e2 = np.eye(2)
    cfg = LossConfig(tau=1.0)
    v1 = tmcl_direction(e2, e2, build_positive_sets(["a", "b"]), cfg).value
    t1 = 2 * math.log(1 + math.exp(-1))
    m4 = np.tile(l2_normalize_rows([[1.0, 2.0, 2.0]]), (4, 1))
    v2 = tmcl_direction(m4, m4, build_positive_sets(list("abcd")), cfg).value
    t2 = 4 * math.log(4)
    z = np.tile(l2_normalize_rows([[1.0, 1.0]]), (2, 1))
    v3 = emcl(z, z, PairSubset(((0, 0), (1, 1)), batch_size=4), cfg).parts["image_to_sequence"]
    t3 = 2 * math.log(4)
    errs = [abs(v1 - t1), abs(v2 - t2), abs(v3 - t3)]
    ok = max(errs) < 1e-9
    return ok, f"spot-value deviations {', '.join(f'{e:.1e}' for e in errs)}"


def check_log_softmax_stability(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for scale in (1.0, 1e3):
        m = rng.normal(size=(8, 8)) * scale
        sums = np.exp(log_softmax_rows(m)).sum(axis=1)
        worst = max(worst, float(np.max(np.abs(sums - 1.0))))
    ok = worst < 1e-9
    return ok, f"row-sum deviation {worst:.1e} at logit scale up to 1e3"


def check_permutation_invariance(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 3)
    n, d = 6, 5
    a, b = _unit(rng, n, d), _unit(rng, n, d)
    groups = [0, 0, 1, 2, 2, 3]
    cfg = LossConfig(tau=0.07)
    base = tmcl_symmetric(a, b, build_positive_sets(groups), cfg).value
    perm = rng.permutation(n)
    permuted = tmcl_symmetric(
        a[perm], b[perm], build_positive_sets([groups[i] for i in perm]), cfg
    ).value
    dev = abs(base - permuted)
    return dev < 1e-12, f"permutation deviation {dev:.1e}"


def run_selfcheck(seed: int = 0) -> list[tuple[str, bool, str]]:
    checks = [
        ("gradient-oracle", check_gradients),
        ("reduction-identities", check_reductions),
        ("closed-form-spot-values", check_spot_values),
        ("log-softmax-stability", check_log_softmax_stability),
        ("permutation-invariance", check_permutation_invariance),
    ]
    return [(name, *fn(seed)) for name, fn in checks]
