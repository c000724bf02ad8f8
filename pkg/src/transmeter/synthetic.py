"""Synthetic source/target families with a known best source."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .data import Dataset

SUITES = ("ordering",)

LATENT_DIM = 4
TARGET_DIM = 5
SOURCE_DIM = 8
NOISE_DIM = 10
N_TARGET = 200
N_SOURCE = 2000
POSITIVE_RATE = 0.3


BALLS = ((0.6, -0.4, 0.3),)


def _centers() -> np.ndarray:
    c = np.zeros((len(BALLS), LATENT_DIM))
    for i, ball in enumerate(BALLS):
        k = min(len(ball), LATENT_DIM)
        c[i, :k] = ball[:k]
    return c


def _latent_labels(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # Positives sit inside off-center balls.  No affine map turns a ball's
    # inside into its outside, so inverted labels cannot be undone by the
    # encoder alone; that is what makes the flip option identifiable.
    z = rng.normal(size=(n, LATENT_DIM))
    dist = np.min(np.sum((z[:, None, :] - _centers()[None]) ** 2, axis=2), axis=1)
    radius = np.quantile(dist, POSITIVE_RATE)
    return z, (dist < radius).astype(np.int64)


def _mixing(rng: np.random.Generator, out_dim: int) -> np.ndarray:
    """Random full-rank (LATENT_DIM, out_dim) map, well conditioned."""
    while True:
        m = rng.normal(size=(LATENT_DIM, out_dim))
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] / s[0] > 0.2:
            return m


def ordering_suite(seed: int) -> Tuple[Dict[str, Dataset], str]:
    """Target plus three sources and the expected ordering.

    - ``source_a``: the target's latent process under a different full-rank
      linear map into a different dimension, same label rule.
    - ``source_b``: gaussian features with coin-flip labels.
    - ``source_c``: the rows of ``source_a`` with every label inverted.

    Classes are imbalanced so that aligned representations carry a
    preferred label orientation.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7001]))
    z_t, y_t = _latent_labels(N_TARGET, rng)
    target = z_t @ _mixing(rng, TARGET_DIM) + 0.05 * rng.normal(size=(N_TARGET, TARGET_DIM))

    z_s, y_s = _latent_labels(N_SOURCE, rng)
    a = z_s @ _mixing(rng, SOURCE_DIM) + 0.05 * rng.normal(size=(N_SOURCE, SOURCE_DIM))

    b = rng.normal(size=(N_SOURCE, NOISE_DIM))
    y_b = rng.integers(0, 2, size=N_SOURCE)

    datasets = {
        "target": Dataset("target", target, y_t),
        "source_a": Dataset("source_a", a, y_s),
        "source_b": Dataset("source_b", b, y_b),
        "source_c": Dataset("source_c", a.copy(), 1 - y_s),
    }
    notes = (
        f"# Synthetic suite 'ordering' (seed {seed})\n\n"
        f"- target: {N_TARGET} rows, {TARGET_DIM} features, {POSITIVE_RATE:.0%} positive.\n"
        f"- source_a: {N_SOURCE} rows, {SOURCE_DIM} features; the target's latent process "
        "under another full-rank linear map, same label rule.\n"
        f"- source_b: {N_SOURCE} rows, {NOISE_DIM} gaussian noise features, coin-flip labels.\n"
        "- source_c: source_a's rows with inverted labels.\n\n"
        "Expected: source_a and source_c both rank above source_b; "
        "source_c is measured best with flipped target labels.\n"
        "expected_best: source_a\n"
        "expected_worst: source_b\n"
        "expected_flip: source_c\n"
    )
    return datasets, notes


def generate(suite: str, seed: int) -> Tuple[Dict[str, Dataset], str]:
    if suite == "ordering":
        return ordering_suite(seed)
    raise ValueError(f"unknown suite {suite!r}; available: {', '.join(SUITES)}")
