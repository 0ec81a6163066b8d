import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dcrefine.dataset import Dataset, GrayImage, LabeledSample, SynthSpec, synth_glyphs  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def make_dataset(arrays, labels, classes=None, role="train", first_id=0, truth=False) -> Dataset:
    """Dataset from uint8 arrays; ``truth`` records each label as the true label."""
    k = max(max(labels) + 1, 2)
    classes = classes or tuple(f"c{i}" for i in range(k))
    samples = [LabeledSample(first_id + i, GrayImage.from_array(np.asarray(a, dtype=np.uint8)), int(y),
                             true_label=int(y) if truth else None)
               for i, (a, y) in enumerate(zip(arrays, labels))]
    return Dataset(tuple(classes), tuple(samples), role)


def blob_images(n_per_class: int, side: int = 4, seed: int = 0, spread: float = 20.0,
                classes: int = 2) -> tuple[list, list]:
    """Gray images whose class is encoded by which half of the image is dark."""
    rng = np.random.default_rng(seed)
    arrays, labels = [], []
    for c in range(classes):
        proto = np.full((side, side), 220.0)
        cols = np.array_split(np.arange(side), classes)[c]
        proto[:, cols] = 30.0
        for _ in range(n_per_class):
            arrays.append(np.clip(proto + rng.normal(0, spread, proto.shape), 0, 255).astype(np.uint8))
            labels.append(c)
    return arrays, labels


@pytest.fixture(scope="session")
def small_glyphs():
    return synth_glyphs(SynthSpec(3, 12, 16, 0.3, seed=5))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# --- toy objectives speaking the SGD/hypergradient protocol (n, grad, sample_grads) ---

class HalfSquare:
    """l(z; theta) = (theta - z)^2 / 2 on scalar data."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=np.float64)
        self.n = len(self.z)

    def grad(self, theta, idx):
        r = theta[0] - self.z[np.asarray(idx)]
        return float(0.5 * np.mean(r ** 2)), np.array([r.mean()])

    def sample_grads(self, theta, idx):
        return (theta[0] - self.z[np.asarray(idx)])[:, None]


class LinearLoss:
    """l_i(theta) = g_i . theta; every Hessian vanishes."""

    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)
        self.n = len(self.g)

    def grad(self, theta, idx):
        idx = np.asarray(idx)
        return float((self.g[idx] @ theta).mean()), self.g[idx].mean(0)

    def sample_grads(self, theta, idx):
        return self.g[np.asarray(idx)].copy()


class SoftmaxRegression:
    """Convex multinomial logistic regression; theta = W (d x k) then b (k)."""

    def __init__(self, x, y, k):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.k = k
        self.n = len(self.y)

    def num_params(self):
        return self.x.shape[1] * self.k + self.k

    def _probs(self, theta, idx):
        d = self.x.shape[1]
        z = self.x[idx] @ theta[:d * self.k].reshape(d, self.k) + theta[d * self.k:]
        z = z - z.max(1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(1, keepdims=True)

    def sample_grads(self, theta, idx):
        idx = np.asarray(idx)
        p = self._probs(theta, idx)
        p[np.arange(len(idx)), self.y[idx]] -= 1.0
        return np.concatenate([np.einsum("nd,nk->ndk", self.x[idx], p).reshape(len(idx), -1), p], 1)

    def grad(self, theta, idx):
        idx = np.asarray(idx)
        p = self._probs(theta, idx)
        loss = -np.log(p[np.arange(len(idx)), self.y[idx]]).mean()
        return float(loss), self.sample_grads(theta, idx).mean(0)
