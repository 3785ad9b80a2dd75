"""Property checks that run without a test harness (``milblock selftest``)."""

import itertools

import numpy as np

from .autodiff import Graph, grad_check, topk_mean_columns
from .encoder import encode_graph
from .head import ORDERINGS, POOLINGS, HeadParams, MilConfig, forward, resolve_k, trace
from .metrics import weighted_ce
from .rng import RandomStream, splitmix64


def _head_loss(config, label, weights, normalize=False):
    def f(g, Z, W, b):
        tr = trace(Z, W, b, config)
        return weighted_ce(tr.probs, label, weights, normalize=normalize)
    return f


def _encoder_loss(config, patches, label, weights):
    def f(g, W1, b1, W2, b2, W, b):
        Z = encode_graph(g.constant(patches), W1, b1, W2, b2)
        return weighted_ce(trace(Z, W, b, config).probs, label, weights)
    return f


def check_gradients(n_cases=18, seed=11, tol=1e-6):
    """grad_check over ordering x pooling x C in {1, 3}, with and without the encoder."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    combos = list(itertools.product(ORDERINGS, POOLINGS, (1, 3)))
    for i in range(n_cases):
        ordering, pooling, C = combos[i % len(combos)]
        M = int(rng.integers(1, 17))
        D = int(rng.integers(1, 9))
        cfg = MilConfig(ordering, pooling, float(rng.uniform(0.1, 1.0)), C, D)
        label = int(rng.integers(0, max(C, 2)))
        weights = rng.uniform(0.5, 2.0, max(C, 2))
        if i % 3 == 2:
            P, H = 2, int(rng.integers(2, 6))
            params = [rng.normal(size=(H, P * P)), rng.normal(size=H) * 0.1,
                      rng.normal(size=(D, H)), rng.normal(size=D) * 0.1,
                      rng.normal(size=(C, D)), rng.normal(size=C)]
            err = grad_check(_encoder_loss(cfg, rng.uniform(size=(M, P * P)), label, weights), params)
        else:
            params = [rng.normal(size=(M, D)), rng.normal(size=(C, D)), rng.normal(size=C)]
            err = grad_check(_head_loss(cfg, label, weights, normalize=(ordering == "I1")), params)
        worst = max(worst, err)
    return worst <= tol, f"max relative error {worst:.3e} over {n_cases} configs (tol {tol:g})"


def check_pooling_identities(seed=12):
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(50):
        x = rng.normal(size=(int(rng.integers(1, 30)), int(rng.integers(1, 6))))
        g = Graph()
        t = g.constant(x)
        ok &= np.array_equal(topk_mean_columns(t, 1).data, x.max(axis=0))
        ok &= np.allclose(topk_mean_columns(t, x.shape[0]).data, x.mean(axis=0), rtol=0, atol=1e-12)
    counts = [resolve_k(f, 196) for f in (0.125, 0.25, 0.5)]
    ok &= counts == [25, 49, 98]
    return bool(ok), f"k=1 max, k=M mean, 196-patch counts {counts}"


def _random_head(rng, C, D):
    return HeadParams(rng.normal(size=(C, D)), rng.normal(size=C))


def check_permutation_invariance(n_bags=100, seed=13):
    rng = np.random.default_rng(seed)
    worst, label_changes = 0.0, 0
    for _ in range(n_bags):
        M, D, C = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.choice([1, 3]))
        Z = rng.normal(size=(M, D))
        head = _random_head(rng, C, D)
        perm = rng.permutation(M)
        for ordering, pooling in itertools.product(ORDERINGS, POOLINGS):
            cfg = MilConfig(ordering, pooling, 0.3, C, D)
            a, b = forward(Z, head, cfg), forward(Z[perm], head, cfg)
            worst = max(worst, float(np.max(np.abs(a.probs - b.probs))))
            label_changes += a.label != b.label
    ok = worst <= 1e-12 and label_changes == 0
    return ok, f"max prob change {worst:.1e}, label changes {label_changes}"


def check_binary_max_agreement(n=1000, seed=14):
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(n):
        M, D = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        Z, head = rng.normal(size=(M, D)), _random_head(rng, 1, D)
        a = forward(Z, head, MilConfig("I1", "max", 1.0, 1, D))
        b = forward(Z, head, MilConfig("I2", "max", 1.0, 1, D))
        agree += a.label == b.label
    return agree == n, f"{agree}/{n} labels agree"


def check_average_counterexample():
    Z = np.array([[100.0], [-1.0], [-1.0], [-1.0]])
    head = HeadParams(np.array([[1.0]]), np.array([0.0]))
    i1 = forward(Z, head, MilConfig("I1", "average", 1.0, 1, 1))
    i2 = forward(Z, head, MilConfig("I2", "average", 1.0, 1, 1))
    ok = i1.label == 0 and i2.label == 1
    return ok, f"I1 p={i1.probs[0]:.5f} label {i1.label}; I2 p={i2.probs[0]:.5f} label {i2.label}"


def check_random_stream():
    first = splitmix64(0)[1]
    a = RandomStream(7).uniform(0.0, 1.0, 1000)
    b = RandomStream(7).uniform(0.0, 1.0, 1000)
    ok = first == 0xE220A8397B1DCDAF and np.array_equal(a, b)
    return ok, f"splitmix64(0) = {first:#018x}"


CHECKS = [
    ("gradient_check", check_gradients),
    ("pooling_identities", check_pooling_identities),
    ("permutation_invariance", check_permutation_invariance),
    ("binary_max_i1_i2_agreement", check_binary_max_agreement),
    ("average_pooling_i1_i2_counterexample", check_average_counterexample),
    ("random_stream", check_random_stream),
]


def run_all():
    """Yields ``(name, passed, detail)`` for every check."""
    for name, fn in CHECKS:
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(passed), detail
