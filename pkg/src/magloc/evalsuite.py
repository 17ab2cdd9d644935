"""Localization error statistics, the DTW fingerprint baseline and speed sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .magdata import (
    NormalizationStats,
    Trace,
    WindowedDataset,
    factor_label,
    parse_factor,
    resample_speed,
    trace_features,
    windows_from_traces,
)

# maps a WindowedDataset to predicted positions [S, 2]
Predictor = Callable[[WindowedDataset], np.ndarray]


# ------------------------------------------------------------------- metrics


def euclidean_errors(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"expected congruent [S, 2] arrays, got {pred.shape} and {truth.shape}")
    d = pred - truth
    return np.hypot(d[:, 0], d[:, 1])


@dataclass
class ErrorReport:
    errors: np.ndarray
    mean: float
    sd: float
    cdf: list  # (error, fraction of queries with error <= it)
    metadata: dict = field(default_factory=dict)

    def cdf_at(self, x: float) -> float:
        return float(np.mean(self.errors <= x))

    def to_dict(self):
        return {
            "errors": [float(e) for e in self.errors],
            "mean": self.mean,
            "sd": self.sd,
            "cdf": [[float(e), float(p)] for e, p in self.cdf],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["errors"], dtype=float),
            d["mean"],
            d["sd"],
            [tuple(p) for p in d["cdf"]],
            d.get("metadata", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def summarize(errors, **metadata) -> ErrorReport:
    """Mean, population SD and the empirical CDF at each distinct error."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("cannot summarize an empty error list")
    values, counts = np.unique(e, return_counts=True)
    frac = np.cumsum(counts) / e.size
    frac[-1] = 1.0
    cdf = list(zip(values.tolist(), frac.tolist()))
    return ErrorReport(e, float(e.mean()), float(e.std()), cdf, dict(metadata))


# ------------------------------------------------------------------------ DTW


def dtw_accumulate(cost) -> np.ndarray:
    """Accumulated DTW cost for a batch of local-cost matrices ``[B, n, m]``.

    ``D(i, j) = cost(i, j) + min(D(i-1, j), D(i, j-1), D(i-1, j-1))`` with
    ``D(0, 0) = 0`` and out-of-range cells at infinity.  Returns ``D(n, m)``
    per batch entry.
    """
    B, n, m = cost.shape
    prev = np.full((B, m + 1), np.inf)
    prev[:, 0] = 0.0
    for i in range(n):
        cur = np.empty((B, m + 1))
        cur[:, 0] = np.inf
        # vertical and diagonal predecessors are known for the whole row
        vd = np.minimum(prev[:, 1:], prev[:, :-1])
        ci = cost[:, i]
        for j in range(m):
            cur[:, j + 1] = ci[:, j] + np.minimum(vd[:, j], cur[:, j])
        prev = cur
    return prev[:, m]


def _as_sequence(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ValueError("DTW needs a non-empty sequence")
    return a


def _pairwise(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def dtw_distance(a, b) -> float:
    """Full (unbanded) DTW with Euclidean local cost.

    ``a`` and ``b`` are ``[n]`` scalar or ``[n, d]`` vector sequences.
    """
    a, b = _as_sequence(a), _as_sequence(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return float(dtw_accumulate(_pairwise(a, b)[None])[0])


@dataclass(frozen=True, eq=False)
class FingerprintDB:
    """Normalized reference feature sequences with per-sample positions."""

    features: tuple  # per trace [N, 3]
    positions: tuple  # per trace [N, 2]
    trace_ids: tuple
    window: int

    def __len__(self):
        return sum(max(0, len(f) - self.window + 1) for f in self.features)


def build_fingerprint_db(traces: Sequence[Trace], stats: NormalizationStats, window: int):
    return FingerprintDB(
        tuple(trace_features(tr, stats) for tr in traces),
        tuple(tr.pos for tr in traces),
        tuple(tr.trace_id for tr in traces),
        window,
    )


def dtw_scores(db: FingerprintDB, query) -> tuple[np.ndarray, np.ndarray]:
    """DTW distance from ``query`` to every reference window, with window end positions.

    Candidates are ordered by (trace order, start index).
    """
    q = _as_sequence(query)
    T = db.window
    scores, labels = [], []
    for f, pos in zip(db.features, db.positions):
        if len(f) < T:
            continue
        cost = _pairwise(q, f)  # [n, N]
        win = np.lib.stride_tricks.sliding_window_view(cost, T, axis=1)  # [n, N-T+1, T]
        scores.append(dtw_accumulate(np.ascontiguousarray(win.transpose(1, 0, 2))))
        labels.append(pos[T - 1 :])
    if not scores:
        raise ValueError(f"every fingerprint trace is shorter than the window ({T})")
    return np.concatenate(scores), np.concatenate(labels)


def dtw_localize(db: FingerprintDB, query) -> np.ndarray:
    """Position of the best-matching reference window; ties go to the first."""
    scores, labels = dtw_scores(db, query)
    return labels[int(np.argmin(scores))].copy()


# ---------------------------------------------------------------- predictors


def model_predictor(spec, params, batch_size: int = 256) -> Predictor:
    from .train import predict

    return lambda ds: predict(spec, params, ds.features, batch_size)


def dtw_predictor(db: FingerprintDB) -> Predictor:
    return lambda ds: np.array([dtw_localize(db, q) for q in ds.features]).reshape(-1, 2)


def oracle_predictor(ds: WindowedDataset) -> np.ndarray:
    """A perfect localizer; useful as a reference row."""
    return ds.labels.copy()


# ---------------------------------------------------------------- protocols


def evaluate(predictor: Predictor, traces, stats, window: int, stride: int = 1, **metadata):
    """Window ``traces``, predict, and return ``(report, predictions, truth)``."""
    ds = windows_from_traces(traces, window, stats, stride)
    pred = np.asarray(predictor(ds), dtype=float)
    report = summarize(euclidean_errors(pred, ds.labels), **metadata)
    return report, pred, ds.labels


def speed_sweep(
    predictor: Predictor,
    traces,
    factors,
    stats,
    window: int,
    stride: int = 1,
    **metadata,
) -> dict[str, ErrorReport]:
    """One error report per speed factor, keyed ``"1/8"`` ... ``"8"``."""
    out = {}
    for f in factors:
        f = parse_factor(f)
        label = factor_label(f)
        resampled = [resample_speed(tr, f) for tr in traces]
        report, _, _ = evaluate(
            predictor, resampled, stats, window, stride, speed_factor=label, **metadata
        )
        out[label] = report
    return out


def sweep_to_json(sweep: dict[str, ErrorReport]) -> str:
    return json.dumps({k: r.to_dict() for k, r in sweep.items()}, indent=2) + "\n"


def export_trajectory(pred, truth, path) -> Path:
    """CSV ``idx,pred_x,pred_y,true_x,true_y`` in query order."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction/truth lengths differ: {pred.shape} vs {truth.shape}")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("idx,pred_x,pred_y,true_x,true_y\n")
        for i, (p, t) in enumerate(zip(pred, truth)):
            vals = ",".join(repr(float(v)) for v in (p[0], p[1], t[0], t[1]))
            fh.write(f"{i},{vals}\n")
    return path


def read_trajectory(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    pred = np.array([[float(r["pred_x"]), float(r["pred_y"])] for r in rows]).reshape(-1, 2)
    truth = np.array([[float(r["true_x"]), float(r["true_y"])] for r in rows]).reshape(-1, 2)
    return pred, truth
