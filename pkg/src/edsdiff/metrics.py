"""Sample-quality metrics and guidance-vanishing analysis on raw coordinates.

These numbers are computed in the data space of the toy problem, not in any
learned feature space, and are not comparable to image-benchmark FID values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("point set must be a 2-D array (n, d)")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least d+1={d + 1} points, got {n}")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(d, d)
    return mu, cov


def _sym_reg(c, reg=1e-10):
    return 0.5 * (c + c.T) + reg * np.eye(len(c))


def _psd_sqrt(a):
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(s1, s2) -> float:
    """Tr((S1 S2)^{1/2}) for symmetric PSD S1, S2.

    2x2: sqrt(tr M + 2 sqrt(det M)) with M = S1 S2 (both eigenvalues of M are
    real and nonnegative).  Otherwise via the symmetric S1^{1/2} S2 S1^{1/2}.
    """
    if s1.shape == (2, 2):
        m = s1 @ s2
        det = max(np.linalg.det(m), 0.0)
        return float(np.sqrt(max(np.trace(m) + 2.0 * np.sqrt(det), 0.0)))
    r = _psd_sqrt(s1)
    w = np.linalg.eigvalsh(r @ s2 @ r)
    return float(np.sum(np.sqrt(np.clip(w, 0, None))))


def frechet_from_moments(mu1, c1, mu2, c2) -> float:
    c1, c2 = _sym_reg(np.atleast_2d(c1)), _sym_reg(np.atleast_2d(c2))
    diff = np.asarray(mu1) - np.asarray(mu2)
    val = diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * trace_sqrt_product(c1, c2)
    if not np.isfinite(val):
        raise ValueError("degenerate covariance: Frechet distance is not finite")
    return float(max(val, 0.0))


def frechet_distance(real, gen) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) of fitted Gaussians."""
    mu1, c1 = _moments(real)
    mu2, c2 = _moments(gen)
    return frechet_from_moments(mu1, c1, mu2, c2)


def _pairwise(a, b):
    # explicit differences: exact zeros for coincident points, no cancellation far from the origin
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def knn_radii(x, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour in the same set (self excluded)."""
    radii = np.empty(len(x))
    for s in range(0, len(x), 512):
        d = _pairwise(x[s:s + 512], x)
        radii[s:s + 512] = np.partition(d, k, axis=1)[:, k]
    return radii


def _coverage(ref, radii, query) -> float:
    inside = 0
    for s in range(0, len(query), 512):
        d = _pairwise(query[s:s + 512], ref)
        inside += int(np.sum(np.any(d <= radii[None, :], axis=1)))
    return inside / len(query)


def precision_recall(real, gen, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision (gen inside real balls) and recall (real inside gen balls)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    if k < 1 or len(real) < k + 1 or len(gen) < k + 1:
        raise ValueError(f"both sets need at least k+1={k + 1} points")
    precision = _coverage(real, knn_radii(real, k), gen)
    recall = _coverage(gen, knn_radii(gen, k), real)
    return precision, recall


def conditional_accuracy(samples, labels, means) -> float:
    """Fraction of samples whose nearest component mean is their conditioning label."""
    samples = np.atleast_2d(samples)
    d = _pairwise(samples, np.asarray(means, dtype=np.float64))
    return float(np.mean(np.argmin(d, axis=1) == np.asarray(labels)))


def per_class_frechet(real, real_labels, gen, gen_labels, K: int) -> np.ndarray:
    out = np.empty(K)
    for k in range(K):
        out[k] = frechet_distance(real[real_labels == k], gen[gen_labels == k])
    return out


REPORT_COLUMNS = ["frechet", "mean_per_class_frechet", "precision", "recall", "conditional_accuracy",
                  "n_real", "n_gen"]


@dataclass
class MetricsReport:
    frechet: float
    per_class_frechet: list[float] | None
    precision: float
    recall: float
    conditional_accuracy: float | None
    n_real: int
    n_gen: int
    k: int = 3

    @property
    def mean_per_class_frechet(self) -> float | None:
        if not self.per_class_frechet:
            return None
        return float(np.mean(self.per_class_frechet))

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_per_class_frechet"] = self.mean_per_class_frechet
        return json.dumps(d, indent=2)

    def csv_row(self) -> list:
        return [getattr(self, c) if c != "mean_per_class_frechet" else self.mean_per_class_frechet
                for c in REPORT_COLUMNS]


def evaluate(real, real_labels, gen, gen_labels, means, k: int = 3) -> MetricsReport:
    """Full report; per-class and conditional metrics need generated labels."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    prec, rec = precision_recall(real, gen, k)
    pcf = acc = None
    if gen_labels is not None:
        gen_labels = np.asarray(gen_labels)
        pcf = per_class_frechet(real, np.asarray(real_labels), gen, gen_labels, len(means)).tolist()
        acc = conditional_accuracy(gen, gen_labels, means)
    return MetricsReport(frechet_distance(real, gen), pcf, prec, rec, acc, len(real), len(gen), k)


@dataclass
class VanishingAnalysis:
    crossings: list[int | None]
    bin_edges: np.ndarray
    counts: np.ndarray
    threshold_fraction: float
    mode: str = "sustained"

    @property
    def crossed(self) -> np.ndarray:
        return np.array([c for c in self.crossings if c is not None], dtype=float)

    def summary(self) -> dict:
        c = self.crossed
        return {
            "n_trajectories": len(self.crossings),
            "n_crossed": int(len(c)),
            "threshold_fraction": self.threshold_fraction,
            "mode": self.mode,
            "mean_crossing_t": float(c.mean()) if len(c) else None,
            "std_crossing_t": float(c.std()) if len(c) else None,
            "min_crossing_t": int(c.min()) if len(c) else None,
            "max_crossing_t": int(c.max()) if len(c) else None,
        }


def crossing_timestep(t, entropy, threshold: float, mode: str = "sustained"):
    """Vanishing point of one trajectory (arrays ordered by decreasing t), or None.

    sustained: largest t from which entropy stays below ``threshold`` until the end.
    first: largest t at which entropy is below ``threshold`` at all.
    """
    below = np.asarray(entropy) < threshold
    if not below.any():
        return None
    if mode == "first":
        return int(t[int(np.argmax(below))])
    if mode != "sustained":
        raise ValueError(f"unknown crossing mode {mode!r}")
    if not below[-1]:
        return None
    above = np.nonzero(~below)[0]
    start = 0 if len(above) == 0 else above[-1] + 1
    return int(t[start])


def vanishing_analysis(trajectories, threshold_fraction: float, K: int, T: int, n_bins: int = 20,
                       mode: str = "sustained") -> VanishingAnalysis:
    if not trajectories:
        raise ValueError("no trajectories")
    thr = threshold_fraction * np.log(K)
    crossings = [crossing_timestep(tr.t, tr.entropy, thr, mode) for tr in trajectories]
    edges = np.linspace(0.5, T + 0.5, n_bins + 1)
    c = np.array([x for x in crossings if x is not None], dtype=float)
    counts, _ = np.histogram(c, bins=edges)
    return VanishingAnalysis(crossings, edges, counts, threshold_fraction, mode)


def write_report(report: MetricsReport, json_path, csv_path) -> None:
    with open(json_path, "w") as f:
        f.write(report.to_json())
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        w.writerow(report.csv_row())


def write_histogram(analysis: VanishingAnalysis, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(analysis.bin_edges[:-1], analysis.bin_edges[1:], analysis.counts):
            w.writerow([lo, hi, int(n)])
