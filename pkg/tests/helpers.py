"""Shared oracles for the test-suite: finite-difference gradient checks and
tiny synthetic datasets."""

from __future__ import annotations

import itertools
import math
import os
from pathlib import Path

import numpy as np

from fedsikd import tensor_nn as nn
from fedsikd.clustering import inertia
from fedsikd.data import Dataset

EPS = 1e-4
GRAD_RTOL = 1e-3


def rel_err(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _separated_values(rng, shape, gap=0.05):
    """Distinct values, all at least ``gap`` away from zero and from each other."""
    n = int(np.prod(shape))
    mags = gap * (1 + rng.permutation(n))
    signs = rng.choice([-1.0, 1.0], size=n)
    return (signs * mags / (gap * n)).reshape(shape)


def _instance(kind: str, rng):
    """Architecture exercising one layer kind, plus an input batch."""
    n = int(rng.integers(2, 4))
    if kind == "dense":
        f = int(rng.integers(2, 6))
        arch = nn.Architecture("gc", (nn.dense(int(rng.integers(2, 5))), nn.dense(3)), (f,))
        x = rng.normal(size=(n, f))
    elif kind == "conv2d":
        h, w = (int(v) for v in rng.integers(3, 7, size=2))
        c = int(rng.integers(1, 3))
        spec = nn.conv2d(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        arch = nn.Architecture("gc", (spec, nn.flatten(), nn.dense(3)), (h, w, c))
        x = rng.normal(size=(n, h, w, c))
    elif kind == "conv1d":
        length, c = int(rng.integers(3, 9)), int(rng.integers(1, 3))
        spec = nn.conv1d(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        arch = nn.Architecture("gc", (spec, nn.flatten(), nn.dense(3)), (length, c))
        x = rng.normal(size=(n, length, c))
    elif kind == "maxpool1d":
        length, c = int(rng.integers(3, 9)), int(rng.integers(1, 3))
        spec = nn.maxpool1d(int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        arch = nn.Architecture("gc", (spec, nn.flatten(), nn.dense(3)), (length, c))
        x = _separated_values(rng, (n, length, c))
    elif kind == "dropout":
        f = int(rng.integers(2, 6))
        arch = nn.Architecture("gc", (nn.dense(4), nn.dropout(float(rng.uniform(0.1, 0.6))), nn.dense(3)), (f,))
        x = rng.normal(size=(n, f))
    elif kind == "flatten":
        shape = (int(rng.integers(2, 4)), int(rng.integers(1, 4)))
        arch = nn.Architecture("gc", (nn.flatten(), nn.dense(3)), shape)
        x = rng.normal(size=(n,) + shape)
    elif kind in ("relu", "leaky_relu", "softmax"):
        f = int(rng.integers(2, 6))
        act = nn.activation(kind, float(rng.uniform(0.05, 0.5)))
        arch = nn.Architecture("gc", (act, nn.dense(3)), (f,))
        x = _separated_values(rng, (n, f)) if kind != "softmax" else rng.normal(size=(n, f))
    else:
        raise ValueError(kind)
    return arch, x


LAYER_CHECK_KINDS = ("dense", "conv2d", "conv1d", "maxpool1d", "dropout", "flatten", "relu", "leaky_relu", "softmax")


def gradient_check(kind: str, seed: int) -> float:
    """Worst relative error between analytic and central-difference gradients
    (parameters and input) for a random instance of one layer kind."""
    rng = np.random.default_rng(seed)
    arch, x = _instance(kind, rng)
    params = nn.build_model(arch, seed, dtype=np.float64)
    for i, (w, b) in enumerate(params.layers):
        params.layers[i] = (w, rng.normal(size=b.shape))
    proj = rng.normal(size=(len(x), arch.num_classes))
    training = kind == "dropout"

    def loss(p, inp):
        logits, _ = nn.forward(p, inp, training=training, rng=np.random.default_rng(seed))
        return float((logits * proj).sum())

    _, cache = nn.forward(params, x, training=training, rng=np.random.default_rng(seed))
    grads = nn.backward(params, cache, proj)
    dx = nn.input_gradient(params, cache, proj)

    worst = 0.0
    for li, (w, b) in enumerate(params.layers):
        for pi, arr in enumerate((w, b)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + EPS
                up = loss(params, x)
                arr[idx] = old - EPS
                down = loss(params, x)
                arr[idx] = old
                num[idx] = (up - down) / (2 * EPS)
            worst = max(worst, rel_err(grads[li][pi], num))
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + EPS
        up = loss(params, x)
        x[idx] = old - EPS
        down = loss(params, x)
        x[idx] = old
        num[idx] = (up - down) / (2 * EPS)
    worst = max(worst, rel_err(dx, num))
    return worst


def blobs(n_per: int, centres, spread: float = 0.3, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    pts = [np.asarray(c, float) + spread * rng.normal(size=(n_per, len(c))) for c in centres]
    labels = np.repeat(np.arange(len(centres)), n_per)
    return np.concatenate(pts), labels


def toy_classification(n: int = 400, classes: int = 4, dim: int = 6, seed: int = 0, name: str = "toy") -> Dataset:
    """Linearly separable Gaussian classes, one prototype per class."""
    rng = np.random.default_rng(seed)
    protos = 3.0 * rng.normal(size=(classes, dim))
    labels = rng.integers(0, classes, size=n)
    feats = protos[labels] + rng.normal(size=(n, dim))
    return Dataset(feats.astype(np.float32), labels, classes, name)


def toy_archs(dim: int = 6, classes: int = 4):
    teacher = nn.Architecture("toy_teacher", (nn.dense(16), nn.activation("relu"), nn.dense(classes)), (dim,))
    student = nn.Architecture("toy_student", (nn.dense(8), nn.activation("relu"), nn.dense(classes)), (dim,))
    return teacher, student


# ---------------------------------------------------------------- clustering oracles
# Plain-Python reference formulas, written independently of the library.


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def centroid(pts):
    return [sum(c) / len(pts) for c in zip(*pts)]


def groups(points, labels):
    out = {}
    for p, l in zip(points, labels):
        out.setdefault(l, []).append(list(p))
    return [out[k] for k in sorted(out)]


def silhouette_oracle(points, labels):
    scores = []
    for i, p in enumerate(points):
        own = [q for j, q in enumerate(points) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(dist(p, q) for q in own) / len(own)
        b = min(
            sum(dist(p, q) for q in g) / len(g)
            for lab, g in zip(sorted(set(labels)), groups(points, labels))
            if lab != labels[i]
        )
        scores.append((b - a) / max(a, b))
    return sum(scores) / len(scores)


def ch_oracle(points, labels):
    gs = groups(points, labels)
    k, n = len(gs), len(points)
    overall = centroid(points)
    between = sum(len(g) * dist(centroid(g), overall) ** 2 for g in gs)
    within = sum(dist(p, centroid(g)) ** 2 for g in gs for p in g)
    return (between / (k - 1)) / (within / (n - k))


def db_oracle(points, labels):
    gs = groups(points, labels)
    cs = [centroid(g) for g in gs]
    s = [sum(dist(p, c) for p in g) / len(g) for g, c in zip(gs, cs)]
    return sum(max((s[i] + s[j]) / dist(cs[i], cs[j]) for j in range(len(gs)) if j != i) for i in range(len(gs))) / len(gs)


def avg_linkage_oracle(points):
    """O(n^3) reference: recompute every cluster-pair average distance from scratch each step."""
    clusters = {i: [i] for i in range(len(points))}
    nxt = len(points)
    merges = []
    while len(clusters) > 1:
        best = None
        for a, b in itertools.combinations(sorted(clusters), 2):
            d = sum(dist(points[i], points[j]) for i in clusters[a] for j in clusters[b])
            d /= len(clusters[a]) * len(clusters[b])
            if best is None or d < best[2]:
                best = (a, b, d)
        a, b, d = best
        clusters[nxt] = clusters.pop(a) + clusters.pop(b)
        merges.append((a, b, d, len(clusters[nxt])))
        nxt += 1
    return merges


def best_2partition(x):
    best = None
    n = len(x)
    for mask in range(1, 2 ** (n - 1)):
        lab = np.array([(mask >> i) & 1 for i in range(n)])
        cents = np.array([x[lab == c].mean(0) for c in (0, 1)])
        j = inertia(x, lab, cents)
        if best is None or j < best[0]:
            best = (j, lab)
    return best


def data_root() -> Path:
    """Dataset root for tests: ``$FEDSIKD_DATA_ROOT`` or ``<repo>/data``."""
    return Path(os.environ.get("FEDSIKD_DATA_ROOT") or Path(__file__).resolve().parents[1] / "data")
