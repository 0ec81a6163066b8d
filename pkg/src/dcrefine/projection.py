"""Neighborhood graphs, exact t-SNE and SVG scatter plots over embeddings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass(frozen=True)
class Embedding:
    rows: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise ParameterError(f"embedding rows must be (N, d>=1), got {rows.shape}")
        ids = np.array(self.ids, dtype=np.int64)
        if ids.shape != (rows.shape[0],):
            raise ParameterError("ids must align with rows")
        if not np.all(np.isfinite(rows)):
            raise ParameterError("embedding has non-finite entries")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.rows.shape[0]


@dataclass(frozen=True)
class NeighborGraph:
    ids: np.ndarray        # (N,) node ids
    neighbors: np.ndarray  # (N, k) neighbor ids, nearest first
    distances: np.ndarray  # (N, k)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    # explicit differences keep d(i,j) == d(j,i) bit-for-bit and translation-stable
    n = x.shape[0]
    out = np.empty((n, n))
    block = max(1, 2 ** 22 // max(1, n * x.shape[1]))
    for start in range(0, n, block):
        diff = x[start:start + block, None, :] - x[None, :, :]
        out[start:start + block] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def knn(emb: Embedding, k: int) -> NeighborGraph:
    """Exact brute-force k nearest neighbors; ties go to the lower id."""
    n = len(emb)
    if not 1 <= k < n:
        raise ParameterError(f"k must lie in [1, {n - 1}], got {k}")
    dist = np.sqrt(pairwise_sq_distances(emb.rows))
    neighbors = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k))
    for i in range(n):
        order = np.lexsort((emb.ids, dist[i]))
        order = order[order != i][:k]
        neighbors[i] = emb.ids[order]
        distances[i] = dist[i, order]
    return NeighborGraph(emb.ids.copy(), neighbors, distances)


# --- t-SNE ----------------------------------------------------------------------

@dataclass(frozen=True)
class TsneConfig:
    perplexity: float | None = None  # default min(30, (N-1)/3)
    iters: int = 500
    learning_rate: float = 200.0
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    seed: int = 0
    tol: float = 1e-5
    max_search_steps: int = 50

    def resolve_perplexity(self, n: int) -> float:
        perp = self.perplexity if self.perplexity is not None else min(30.0, (n - 1) / 3.0)
        if not 1.0 < perp < n:
            raise ParameterError(f"perplexity must lie in (1, {n}), got {perp}")
        return perp


@dataclass(frozen=True)
class TsneResult:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    P: np.ndarray
    entropies: np.ndarray  # achieved per-point entropy in bits
    target_entropy: float


def _row_entropy(d_row: np.ndarray, beta: float):
    # d_row is shifted so its minimum is 0, which keeps exp() from underflowing
    p = np.exp(-d_row * beta)
    sp = p.sum()
    p = p / sp
    h = -np.sum(p[p > 0] * np.log2(p[p > 0]))
    return h, p


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_steps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P_{j|i} matching ``log2(perplexity)`` bits of entropy per row."""
    n = x.shape[0]
    d = pairwise_sq_distances(x)
    target = math.log2(perplexity)
    P = np.zeros((n, n))
    ent = np.zeros(n)
    for i in range(n):
        row = np.delete(d[i], i)
        row = row - row.min()
        scale = row.max()
        if scale == 0:
            raise ParameterError("all embedding rows coincide; affinities are undefined")
        # bisection on the precision beta, starting on the distance scale
        beta, lo, hi = 1.0 / np.median(row[row > 0]), 0.0, np.inf
        h, p = _row_entropy(row, beta)
        for _ in range(max_steps):
            if abs(h - target) <= tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, p = _row_entropy(row, beta)
        ent[i] = h
        P[i, np.arange(n) != i] = p
    return P, ent


def joint_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 50):
    cond, ent = conditional_affinities(x, perplexity, tol, max_steps)
    n = x.shape[0]
    return (cond + cond.T) / (2.0 * n), ent


def _student_q(y: np.ndarray):
    num = 1.0 / (1.0 + pairwise_sq_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P: np.ndarray, y: np.ndarray) -> float:
    _, Q = _student_q(y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne(emb: Embedding | np.ndarray, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    x = emb.rows if isinstance(emb, Embedding) else np.asarray(emb, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise ParameterError("t-SNE needs at least 4 points")
    if cfg.iters < 1:
        raise ParameterError("iters must be >= 1")
    perp = cfg.resolve_perplexity(n)
    P, ent = joint_affinities(x, perp, cfg.tol, cfg.max_search_steps)

    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl0 = kl_divergence(P, y)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(cfg.iters):
        pe = P * cfg.exaggeration if it < cfg.exaggeration_iters else P
        num, Q = _student_q(y)
        w = (pe - Q) * num
        grad = 4.0 * (np.diag(w.sum(1)) - w) @ y
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - cfg.learning_rate * gains * grad
        y = y + update
        y = y - y.mean(0)
    return TsneResult(y, kl0, kl_divergence(P, y), P, ent, math.log2(perp))


# --- SVG / CSV export -------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.3f}"


def scatter_svg(coords, labels, marks=None, path=None, size: int = 600, title: str = "") -> str:
    """Render a scatter plot; ``marks`` maps row index to star/cross/ring."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    labels = list(labels)
    if len(labels) != len(coords):
        raise ParameterError("coords and labels must align")
    marks = marks or {}
    pad = 20.0
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        out.append(f'<title>{title}</title>')
    if len(coords):
        lo, hi = coords.min(0), coords.max(0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        pts = pad + (coords - lo) / span * (size - 2 * pad)
    else:
        pts = coords
    out.append('<g id="points">')
    for (px, py), lab in zip(pts, labels):
        color = PALETTE[int(lab) % len(PALETTE)]
        out.append(f'<circle class="pt" cx="{_fmt(px)}" cy="{_fmt(py)}" r="3" fill="{color}"/>')
    out.append('</g>')
    out.append('<g id="marks">')
    for idx in sorted(marks):
        kind = marks[idx]
        px, py = pts[idx]
        if kind == "star":
            verts = []
            for j in range(10):
                r = 8.0 if j % 2 == 0 else 3.5
                a = -math.pi / 2 + j * math.pi / 5
                verts.append(f"{_fmt(px + r * math.cos(a))},{_fmt(py + r * math.sin(a))}")
            out.append(f'<polygon class="star" points="{" ".join(verts)}" fill="red"/>')
        elif kind == "cross":
            out.append(f'<path class="cross" d="M{_fmt(px - 4)},{_fmt(py - 4)} L{_fmt(px + 4)},{_fmt(py + 4)} '
                       f'M{_fmt(px - 4)},{_fmt(py + 4)} L{_fmt(px + 4)},{_fmt(py - 4)}" '
                       f'stroke="black" stroke-width="1.5"/>')
        elif kind == "ring":
            out.append(f'<circle class="ring" cx="{_fmt(px)}" cy="{_fmt(py)}" r="6" fill="none" '
                       f'stroke="black" stroke-width="1.2"/>')
        else:
            raise ParameterError(f"unknown mark {kind!r}")
    out.append('</g>')
    out.append('</svg>')
    text = "\n".join(out) + "\n"
    if path is not None:
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        except OSError as e:
            raise OSError(f"cannot write SVG to {path}: {e}") from e
    return text


def coords_csv(path, ids, coords, labels, marks=None) -> None:
    marks = marks or {}
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "x", "y", "label", "mark"])
        for row, (sid, (x, y), lab) in enumerate(zip(ids, coords, labels)):
            w.writerow([int(sid), repr(float(x)), repr(float(y)), int(lab), marks.get(row, "")])
