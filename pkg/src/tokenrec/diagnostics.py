"""Representation diagnostics: spectra, clustering MI, receptive fields.

Effective rank of a row set is exp(entropy) of its normalized singular-value
distribution after column centering: r_eff = exp(-sum_k p_k ln p_k) with
p_k = s_k / sum_j s_j. Mutual information estimators come in three forms: a
plug-in estimator over discrete count tables, a KMeans route that clusters
continuous features first, and a nearest-neighbor (Kraskov-style, Ross
variant) estimator for continuous features against discrete labels. All
information quantities are in nats.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .model import ActivationTrace
from .numeric import DataError, NumericsError, make_rng, svd_singular_values

SPECTRUM_ROW_CAP = 10000
MI_CLUSTER_COUNTS = (4, 8, 16, 32, 48, 64, 96)
KSG_NEIGHBORS = 3


# -- spectra ---------------------------------------------------------------


def subsample_rows(x: np.ndarray, cap: int = SPECTRUM_ROW_CAP) -> np.ndarray:
    """Deterministic evenly spaced row subset when x exceeds the cap."""
    n = x.shape[0]
    if n <= cap:
        return x
    idx = (np.arange(cap, dtype=np.int64) * n) // cap
    return x[idx]


def effective_rank(x: np.ndarray, cap: int = SPECTRUM_ROW_CAP) -> float:
    """exp of the spectral entropy of the column-centered matrix.

    An all-zero (post-centering) matrix has no directions at all; that
    degenerate case warns and returns 0.0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise NumericsError(f"effective_rank needs a 2-D matrix with >= 2 rows, got {x.shape}")
    x = subsample_rows(x, cap)
    centered = x - x.mean(axis=0, keepdims=True)
    s = svd_singular_values(centered)
    total = s.sum()
    if total <= 0.0:
        warnings.warn("effective_rank of an all-zero matrix is 0", RuntimeWarning)
        return 0.0
    p = s / total
    nz = p[p > 0.0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def normalized_spectrum(x: np.ndarray, cap: int = SPECTRUM_ROW_CAP) -> np.ndarray:
    """Singular values of the centered matrix divided by the largest one."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise NumericsError(f"normalized_spectrum needs a 2-D matrix with >= 2 rows, got {x.shape}")
    x = subsample_rows(x, cap)
    centered = x - x.mean(axis=0, keepdims=True)
    s = svd_singular_values(centered)
    if s[0] <= 0.0:
        raise NumericsError("normalized_spectrum undefined: leading singular value is 0")
    return s / s[0]


@dataclass
class SpectralReport:
    """Effective rank per (layer, stage); layer -1 is the embedded input."""

    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, sort_keys=True)

    def csv_rows(self) -> list[str]:
        out = ["layer,stage,effective_rank,rows_used"]
        for r in self.rows:
            out.append(f"{r['layer']},{r['stage']},{r['effective_rank']:.10g},{r['rows_used']}")
        return out

    def rank_of(self, layer: int, stage: str) -> float:
        for r in self.rows:
            if r["layer"] == layer and r["stage"] == stage:
                return r["effective_rank"]
        raise KeyError((layer, stage))


_TRACE_STAGES = ("attn_out", "attn_residual", "ffn_out", "block_out")


def stage_rows(traces: list[ActivationTrace], layer: int, stage: str,
               token_mask: np.ndarray) -> np.ndarray:
    """Stack one stage's token rows across traces, filtered by token_mask."""
    mask = np.asarray(token_mask, dtype=bool)
    parts = []
    for t in traces:
        m = t.input if layer < 0 else t.stage(layer, stage)
        if m.ndim == 2:
            m = m[None]
        parts.append(m[:, mask, :].reshape(-1, m.shape[-1]))
    return np.concatenate(parts, axis=0)


def spectral_trajectory(
    traces: list[ActivationTrace], token_mask: np.ndarray, cap: int = SPECTRUM_ROW_CAP
) -> SpectralReport:
    """Effective rank of every stage of every layer plus the input rows."""
    if not traces:
        raise DataError("spectral_trajectory needs at least one trace")
    mask = np.asarray(token_mask, dtype=bool)
    if int(mask.sum()) * _batch_count(traces) < 2:
        raise NumericsError("token filter leaves fewer than 2 rows")
    report = SpectralReport()
    depth = len(traces[0].blocks)
    jobs = [(-1, "input")] + [(l, s) for l in range(depth) for s in _TRACE_STAGES]
    for layer, stage in jobs:
        rows = stage_rows(traces, layer, stage, mask)
        report.rows.append({
            "layer": layer,
            "stage": stage,
            "effective_rank": effective_rank(rows, cap),
            "rows_used": min(rows.shape[0], cap),
        })
    return report


def _batch_count(traces: list[ActivationTrace]) -> int:
    total = 0
    for t in traces:
        total += 1 if t.input.ndim == 2 else t.input.shape[0]
    return total


# -- clustering ---------------------------------------------------------------


def kmeans(
    x: np.ndarray, k: int, seed: int, max_iters: int = 300, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray, float]:
    """Seeded kmeans++ initialization plus Lloyd iterations.

    Returns (labels, centers, inertia). Stops when the inertia improvement
    falls below tol or after max_iters sweeps.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise NumericsError(f"kmeans needs a 2-D matrix, got {x.shape}")
    n = x.shape[0]
    if k < 2:
        raise NumericsError("kmeans needs k >= 2")
    if n < k:
        raise NumericsError(f"kmeans needs at least k={k} rows, got {n}")
    rng = make_rng(seed, 3)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = np.sum(np.square(x - centers[0]), axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[c] = x[int(rng.integers(n))]
        else:
            centers[c] = x[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum(np.square(x - centers[c]), axis=1))

    prev_inertia = np.inf
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = (
            np.sum(np.square(x), axis=1)[:, None]
            - 2.0 * x @ centers.T
            + np.sum(np.square(centers), axis=1)[None, :]
        )
        labels = np.argmin(dists, axis=1)
        inertia = float(np.sum(np.square(x - centers[labels])))
        for c in range(k):
            sel = labels == c
            if sel.any():
                centers[c] = x[sel].mean(axis=0)
        if prev_inertia - inertia <= tol:
            break
        prev_inertia = inertia
    dists = (
        np.sum(np.square(x), axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(np.square(centers), axis=1)[None, :]
    )
    labels = np.argmin(dists, axis=1)
    inertia = float(np.sum(np.square(x - centers[labels])))
    return labels, centers, inertia


# -- mutual information ----------------------------------------------------------


def discrete_mi(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI (nats) between two discrete label arrays."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size or a.size == 0:
        raise NumericsError("discrete_mi needs two equal-length non-empty label arrays")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    counts = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(counts, (ai, bi), 1.0)
    p = counts / counts.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0.0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


def kmeans_mi(features: np.ndarray, labels: np.ndarray, k: int, seed: int) -> float:
    """MI between kmeans cluster assignments of the features and the labels."""
    cluster_labels, _, _ = kmeans(features, k, seed)
    return discrete_mi(cluster_labels, labels)


def ksg_mi_1d(x: np.ndarray, y: np.ndarray, k: int = KSG_NEIGHBORS) -> float:
    """Neighbor-count MI (nats) between scalar x and discrete y, Ross form.

    psi(n) + psi(k) - <psi(label count)> - <psi(radius count)>, where the
    radius of a point is just inside its k-th same-label neighbor distance
    and the radius count includes the point itself. Not clipped at zero.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y).ravel()
    if x.size != y.size:
        raise NumericsError("ksg_mi needs equal-length x and y")
    if x.size < 2 * k + 2:
        raise NumericsError(f"ksg_mi needs at least {2 * k + 2} samples, got {x.size}")
    if np.unique(y).size < 2:
        raise NumericsError("ksg_mi needs at least two distinct labels")
    if np.ptp(x) == 0.0:
        warnings.warn("ksg_mi of a constant feature is 0", RuntimeWarning)
        return 0.0

    _, yi = np.unique(y, return_inverse=True)
    label_counts = np.bincount(yi)
    keep = label_counts[yi] > k
    if not keep.any():
        raise NumericsError(f"every label class needs more than k={k} points")
    x = x[keep]
    yi = yi[keep]
    label_counts = np.bincount(yi)
    n = x.size

    radii = np.empty(n)
    for c in np.unique(yi):
        sel = yi == c
        pts = x[sel][:, None]
        tree = cKDTree(pts)
        dist, _ = tree.query(pts, k=k + 1)
        radii[sel] = dist[:, k]

    full_tree = cKDTree(x[:, None])
    shrunk = np.nextafter(radii, 0.0)
    m = full_tree.query_ball_point(x[:, None], shrunk, return_length=True)
    m = np.asarray(m, dtype=np.float64)

    return float(
        digamma(n) + digamma(k)
        - np.mean(digamma(label_counts[yi]))
        - np.mean(digamma(m))
    )


def ksg_mi(x: np.ndarray, y: np.ndarray, k: int = KSG_NEIGHBORS) -> float:
    """Sum of per-dimension neighbor-count MI for (n, d) features."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return float(sum(ksg_mi_1d(x[:, j], y, k) for j in range(x.shape[1])))


def weighted_mi(values: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean of per-class MI values; weights are positive counts."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.shape != weights.shape or values.size == 0:
        raise NumericsError("weighted_mi needs matching non-empty values and weights")
    if np.any(weights < 0):
        raise NumericsError("weighted_mi weights must be non-negative")
    total = weights.sum()
    if total <= 0.0:
        raise NumericsError("weighted_mi needs a positive total weight")
    return float(np.sum(values * weights) / total)


def action_cluster_mi(
    features: np.ndarray, labels: np.ndarray, k: int, seed: int
) -> float:
    """One-vs-rest cluster MI per action, weighted by positive counts."""
    labels = np.asarray(labels).ravel()
    cluster_labels, _, _ = kmeans(np.asarray(features, dtype=np.float64), k, seed)
    actions = np.unique(labels)
    mis = []
    weights = []
    for a in actions:
        pos = labels == a
        w = int(pos.sum())
        if w == 0 or w == labels.size:
            continue
        mis.append(discrete_mi(cluster_labels, pos.astype(np.int64)))
        weights.append(w)
    if not mis:
        raise NumericsError("action_cluster_mi needs at least two label classes")
    return weighted_mi(np.asarray(mis), np.asarray(weights))


@dataclass
class MiReport:
    """MI per cluster count (and optionally the neighbor-count estimate)."""

    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, sort_keys=True)

    def csv_rows(self) -> list[str]:
        out = ["estimator,clusters,mi_nats"]
        for r in self.rows:
            out.append(f"{r['estimator']},{r.get('clusters', '')},{r['mi_nats']:.10g}")
        return out


def mi_profile(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    cluster_counts: tuple[int, ...] = MI_CLUSTER_COUNTS,
    include_ksg: bool = False,
) -> MiReport:
    """Cluster-MI sweep over the configured cluster counts."""
    report = MiReport()
    for k in cluster_counts:
        if features.shape[0] < k:
            continue
        report.rows.append({
            "estimator": "kmeans",
            "clusters": k,
            "mi_nats": action_cluster_mi(features, labels, k, seed),
        })
    if include_ksg:
        report.rows.append({
            "estimator": "ksg",
            "mi_nats": ksg_mi(features, labels),
        })
    return report


# -- receptive fields -----------------------------------------------------------


@dataclass
class ReceptiveFieldReport:
    """Mean effective receptive width per layer, with a histogram over rows."""

    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, sort_keys=True)

    def csv_rows(self) -> list[str]:
        out = ["layer,mean_width,rows_measured"]
        for r in self.rows:
            out.append(f"{r['layer']},{r['mean_width']:.10g},{r['rows_measured']}")
        return out


def attention_row_widths(weights: np.ndarray) -> np.ndarray:
    """exp(row entropy) of attention weights, averaged over heads.

    weights: (..., heads, S, S) with rows summing to 1 over visible columns.
    Returns (..., S) effective widths.
    """
    w = np.asarray(weights, dtype=np.float64)
    logw = np.where(w > 0.0, np.log(np.maximum(w, 1e-300)), 0.0)
    entropy = -np.sum(w * logw, axis=-1)
    return np.mean(np.exp(entropy), axis=-2)


class ReceptiveFieldAccumulator:
    """Streams batches of attention weights into per-layer width statistics."""

    def __init__(self, depth: int, seq_len: int, num_bins: int = 20) -> None:
        self.depth = depth
        self.seq_len = seq_len
        self.edges = np.linspace(1.0, float(seq_len), num_bins + 1)
        self.sums = np.zeros(depth)
        self.counts = np.zeros(depth, dtype=np.int64)
        self.histograms = np.zeros((depth, num_bins), dtype=np.int64)

    def add(self, layer: int, weights: np.ndarray) -> None:
        widths = attention_row_widths(weights).ravel()
        self.sums[layer] += widths.sum()
        self.counts[layer] += widths.size
        hist, _ = np.histogram(widths, bins=self.edges)
        self.histograms[layer] += hist

    def report(self) -> ReceptiveFieldReport:
        rep = ReceptiveFieldReport()
        for layer in range(self.depth):
            if self.counts[layer] == 0:
                raise NumericsError(f"no attention rows accumulated for layer {layer}")
            rep.rows.append({
                "layer": layer,
                "mean_width": float(self.sums[layer] / self.counts[layer]),
                "rows_measured": int(self.counts[layer]),
                "histogram": self.histograms[layer].tolist(),
                "bin_edges": self.edges.tolist(),
            })
        return rep


def receptive_field_stats(
    per_layer_weights: list[np.ndarray], seq_len: int, num_bins: int = 20
) -> ReceptiveFieldReport:
    """Widths from one batch of attention weights, one array per layer."""
    acc = ReceptiveFieldAccumulator(len(per_layer_weights), seq_len, num_bins)
    for layer, w in enumerate(per_layer_weights):
        acc.add(layer, w)
    return acc.report()


# -- trace files ----------------------------------------------------------------

_TRACE_MAGIC = b"TRAC"
TRACE_VERSION = 1


def write_trace(path, trace: ActivationTrace) -> None:
    """Columnar stage dump of a single-stream trace.

    Layout: magic, u32 version, u32 entry count, then per entry a json line
    (name, layer, rows, cols) length-prefixed with u32, followed by row-major
    little-endian float64 payload. Attention weights are not exported.
    """
    if trace.input.ndim != 2:
        raise DataError("trace export covers a single stream; batch traces are in-memory only")
    entries: list[tuple[str, int, np.ndarray]] = [("input", -1, trace.input)]
    for layer, block in enumerate(trace.blocks):
        for stage in _TRACE_STAGES:
            entries.append((stage, layer, getattr(block, stage)))
    with open(path, "wb") as fh:
        fh.write(_TRACE_MAGIC)
        fh.write(struct.pack("<II", TRACE_VERSION, len(entries)))
        for name, layer, matrix in entries:
            head = json.dumps(
                {"name": name, "layer": layer,
                 "rows": matrix.shape[0], "cols": matrix.shape[1]},
                sort_keys=True,
            ).encode("utf-8")
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def read_trace(path) -> dict[tuple[int, str], np.ndarray]:
    """Load a trace file back as {(layer, stage): matrix}."""
    out: dict[tuple[int, str], np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _TRACE_MAGIC:
            raise DataError("not a trace file: bad magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != TRACE_VERSION:
            raise DataError(f"unsupported trace version {version}")
        for _ in range(count):
            (hlen,) = struct.unpack("<I", fh.read(4))
            head = json.loads(fh.read(hlen).decode("utf-8"))
            rows, cols = int(head["rows"]), int(head["cols"])
            buf = fh.read(8 * rows * cols)
            if len(buf) != 8 * rows * cols:
                raise DataError(f"trace truncated at {head['name']!r}")
            out[(int(head["layer"]), str(head["name"]))] = np.frombuffer(
                buf, dtype="<f8"
            ).astype(np.float64).reshape(rows, cols)
    return out


def write_report_json(path, report) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")


def write_report_csv(path, report) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.csv_rows()) + "\n")
