"""Shared oracles and fixture builders.

The gradient oracle is plain central finite differences over every element
of every input array, independent of the engine's backward passes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from feedrank import tensor as T


def finite_difference(value_fn, arrays, h=1e-4):
    """Central-difference gradients of a scalar function of the given
    float64 arrays (mutated in place element by element)."""
    grads = []
    for arr in arrays:
        assert arr.dtype == np.float64, "finite differences run on 64-bit data"
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = value_fn()
            flat[idx] = orig - h
            fm = value_fn()
            flat[idx] = orig
            gf[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    den = np.max(np.abs(analytic)) + np.max(np.abs(numeric)) + 1e-12 if analytic.size else 1.0
    return float(num / den)


def check_gradients(build_loss, tensors, tol=1e-6, h=1e-4) -> float:
    """Assert analytic gradients of build_loss() match finite differences
    for every tensor; returns the worst relative error seen."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value():
        with T.no_grad():
            return build_loss().item()

    numeric = finite_difference(value, [t.data for t in tensors], h=h)
    worst = 0.0
    for t, a, n in zip(tensors, analytic, numeric):
        err = rel_error(a, n)
        assert err < tol, f"gradient mismatch (rel err {err:.3e} >= {tol}) for tensor of shape {t.shape}"
        worst = max(worst, err)
    return worst


def write_events_csv(path: Path, rows, header=("timestamp", "visitorid", "event", "itemid")) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_categories_csv(path: Path, pairs) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("itemid", "categoryid"))
        writer.writerows(pairs)
    return path


def planted_dataset(tmp_path: Path, num_groups=10, users_per_group=5, items_per_group=10,
                    explicit_per_user=3, seed=7):
    """Synthetic log with block structure: each user interacts with every
    item of their group (implicitly), and explicitly with a few of them.
    Items of group g all carry category g. Returns (events_path, cats_path)."""
    rng = np.random.default_rng(seed)
    rows = []
    t = 1_000_000
    for g in range(num_groups):
        for uu in range(users_per_group):
            user = f"u{g * users_per_group + uu}"
            items = [g * items_per_group + j for j in range(items_per_group)]
            order = rng.permutation(items)
            for item in order:
                rows.append((t, user, "view", f"i{item}"))
                t += 1
            for item in order[-explicit_per_user:]:
                rows.append((t, user, "addtocart", f"i{item}"))
                t += 1
    events = write_events_csv(tmp_path / "events.csv", rows)
    pairs = [(f"i{g * items_per_group + j}", f"c{g}")
             for g in range(num_groups) for j in range(items_per_group)]
    cats = write_categories_csv(tmp_path / "categories.csv", pairs)
    return events, cats


@pytest.fixture
def tiny_store(tmp_path):
    """Hand-written six-user store with known counts for exact assertions."""
    from feedrank import ingest

    rows = [
        # u0: 4 implicit on items a..d, explicit on b (t=50) and d (t=90)
        (10, "u0", "view", "a"), (20, "u0", "view", "b"), (30, "u0", "view", "c"),
        (40, "u0", "view", "d"), (50, "u0", "addtocart", "b"), (90, "u0", "transaction", "d"),
        # u1: 5 implicit, no explicit
        (11, "u1", "view", "a"), (12, "u1", "view", "b"), (13, "u1", "view", "c"),
        (14, "u1", "view", "d"), (15, "u1", "view", "e"),
        # u2: duplicate views of the same item plus explicit on f
        (21, "u2", "view", "e"), (22, "u2", "view", "e"), (23, "u2", "view", "e"),
        (24, "u2", "view", "f"), (25, "u2", "addtocart", "f"),
        # u3: under the interaction threshold, dropped
        (31, "u3", "view", "a"), (32, "u3", "view", "b"), (33, "u3", "view", "c"),
        (34, "u3", "view", "d"),
    ]
    path = write_events_csv(tmp_path / "tiny.csv", rows)
    return ingest(str(path))
