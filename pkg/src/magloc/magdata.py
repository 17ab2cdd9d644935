"""Magnetic trace ingestion, feature derivation, normalization and windowing.

A trace is one walk along a typical trajectory: timestamps, raw 3-axis
magnetometer readings (microtesla) and the ground-truth planar position of
every sample.  Models never see the raw vector; they see the attitude
insensitive triple ``(m_z, |m_xy|, |m_xyz|)`` after z-scoring.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = ("t_sec", "mx_uT", "my_uT", "mz_uT", "x_m", "y_m")

SUPPORTED_FACTORS = tuple(
    [Fraction(n) for n in range(8, 0, -1)] + [Fraction(1, n) for n in range(2, 9)]
)


class TraceFormatError(ValueError):
    """A trace file could not be parsed."""


class TraceValidationError(ValueError):
    """A trace violates one of its invariants."""


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class MagneticSample:
    t: float
    m: tuple[float, float, float]
    pos: tuple[float, float]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trace:
    """Ordered magnetometer samples along one walk.

    Stored column-wise: ``t`` is ``[N]``, ``m`` is ``[N, 3]`` and ``pos`` is
    ``[N, 2]``.  Arrays are read-only after construction.
    """

    t: np.ndarray
    m: np.ndarray
    pos: np.ndarray
    rate_hz: float = 20.0
    trace_id: str = "trace"

    def __post_init__(self):
        t = _frozen(self.t)
        m = _frozen(self.m).reshape(-1, 3)
        pos = _frozen(self.pos).reshape(-1, 2)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "pos", pos)
        n = len(t)
        if len(m) != n or len(pos) != n:
            raise TraceValidationError(
                f"trace {self.trace_id!r}: column lengths differ "
                f"(t={n}, m={len(m)}, pos={len(pos)})"
            )
        if n < 2:
            raise TraceValidationError(f"trace {self.trace_id!r}: trace too short ({n} samples)")
        if not (self.rate_hz > 0):
            raise TraceValidationError(f"trace {self.trace_id!r}: rate_hz must be > 0")
        if not (np.isfinite(m).all() and np.isfinite(pos).all() and np.isfinite(t).all()):
            raise TraceValidationError(f"trace {self.trace_id!r}: non-finite values")
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise TraceValidationError(
                f"trace {self.trace_id!r}: timestamps not strictly increasing at sample {bad[0] + 1}"
            )

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.trace_id == other.trace_id
            and self.rate_hz == other.rate_hz
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.pos, other.pos)
        )

    @property
    def samples(self) -> list[MagneticSample]:
        return [
            MagneticSample(float(t), tuple(map(float, m)), tuple(map(float, p)))
            for t, m, p in zip(self.t, self.m, self.pos)
        ]

    @classmethod
    def from_samples(cls, samples: Sequence[MagneticSample], rate_hz=20.0, trace_id="trace"):
        return cls(
            t=[s.t for s in samples],
            m=[s.m for s in samples],
            pos=[s.pos for s in samples],
            rate_hz=rate_hz,
            trace_id=trace_id,
        )


# --------------------------------------------------------------------------- I/O


def _infer_rate(t):
    dt = float(np.median(np.diff(t)))
    return round(1.0 / dt, 6)


def read_trace(path, rate_hz=None) -> Trace:
    """Parse one trace CSV.  The trace id is the file stem."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip() == CSV_HEADER[0]:
                if tuple(c.strip() for c in row) != CSV_HEADER:
                    raise TraceFormatError(f"{path}:{lineno}: unexpected header {row}")
                continue
            if len(row) != 6:
                raise TraceFormatError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc}") from None
    if len(rows) < 2:
        raise TraceValidationError(f"trace {path.stem!r}: trace too short ({len(rows)} samples)")
    a = np.array(rows)
    rate = rate_hz if rate_hz is not None else _infer_rate(a[:, 0])
    return Trace(t=a[:, 0], m=a[:, 1:4], pos=a[:, 4:6], rate_hz=rate, trace_id=path.stem)


def load_traces(path, rate_hz=None) -> list[Trace]:
    """Load a single trace file, or every ``*.csv`` in a directory (sorted by name)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such trace file or directory: {path}")
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise TraceFormatError(f"{path}: directory contains no .csv traces")
        return [read_trace(f, rate_hz) for f in files]
    return [read_trace(path, rate_hz)]


def trace_to_csv(trace: Trace) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    block = np.column_stack([trace.t, trace.m, trace.pos])
    for row in block:
        # repr() is the shortest decimal that round-trips a float64 exactly
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def write_trace(trace: Trace, path) -> Path:
    path = Path(path)
    if path.suffix != ".csv":
        path = path / f"{trace.trace_id}.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_to_csv(trace))
    return path


# ----------------------------------------------------------------------- features


def derive_features(m) -> np.ndarray:
    """Map magnetometer vectors ``[..., 3]`` to ``(m_z, m_xy, m_xyz)``.

    ``m_xy`` is the horizontal magnitude and ``m_xyz`` the total magnitude;
    ``m_z`` keeps its sign.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != 3:
        raise ValueError(f"expected trailing axis of length 3, got shape {m.shape}")
    mx, my, mz = m[..., 0], m[..., 1], m[..., 2]
    m_xy = np.hypot(mx, my)
    m_xyz = np.sqrt(mx * mx + my * my + mz * mz)
    # guard the m_xyz >= m_xy ordering against last-bit rounding
    m_xyz = np.maximum(m_xyz, np.maximum(m_xy, np.abs(mz)))
    return np.stack([mz, m_xy, m_xyz], axis=-1)


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "sd", _frozen(self.sd))
        if self.mean.shape != (3,) or self.sd.shape != (3,):
            raise ValueError("normalization stats must be 3-vectors")
        if not (self.sd > 0).all():
            raise NormalizationError(f"standard deviations must be positive, got {self.sd}")

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "sd": [float(v) for v in self.sd]}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=d["mean"], sd=d["sd"])


def fit_normalizer(traces: Iterable[Trace]) -> NormalizationStats:
    """Per-feature mean and population standard deviation over all samples."""
    feats = [derive_features(tr.m) for tr in traces]
    if not feats:
        raise NormalizationError("no training traces given")
    return fit_feature_stats(np.concatenate(feats, axis=0))


def fit_feature_stats(f) -> NormalizationStats:
    f = np.asarray(f, dtype=float).reshape(-1, 3)
    if len(f) < 2:
        raise NormalizationError("need at least 2 samples to fit a normalizer")
    mean = f.mean(axis=0)
    sd = f.std(axis=0)
    if not (sd > 0).all():
        names = [n for n, s in zip(("m_z", "m_xy", "m_xyz"), sd) if not s > 0]
        raise NormalizationError(
            f"zero variance in feature(s) {names}; add sensor noise or reject the degenerate trace"
        )
    return NormalizationStats(mean, sd)


def normalize(stats: NormalizationStats, f) -> np.ndarray:
    return (np.asarray(f, dtype=float) - stats.mean) / stats.sd


def trace_features(trace: Trace, stats: NormalizationStats | None = None) -> np.ndarray:
    f = derive_features(trace.m)
    return f if stats is None else normalize(stats, f)


# ---------------------------------------------------------------------- windowing


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Serialized model inputs.

    ``features[s]`` holds samples ``[start, start + T)`` of one trace and
    ``labels[s]`` is the position of the last of them.
    """

    features: np.ndarray  # [S, T, 3]
    labels: np.ndarray  # [S, 2]
    window_size: int
    trace_ids: np.ndarray  # [S] source trace id of every window
    end_index: np.ndarray = field(default=None)  # [S] index of the labelled sample

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return WindowedDataset(
            self.features[idx],
            self.labels[idx],
            self.window_size,
            self.trace_ids[idx],
            None if self.end_index is None else self.end_index[idx],
        )

    def save(self, path):
        np.savez(
            path,
            features=self.features,
            labels=self.labels,
            window_size=self.window_size,
            trace_ids=self.trace_ids.astype(str),
            end_index=self.end_index,
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(
                z["features"], z["labels"], int(z["window_size"]), z["trace_ids"], z["end_index"]
            )


def serialize_windows(
    trace: Trace, window: int, stride: int = 1, stats: NormalizationStats | None = None
) -> WindowedDataset:
    """Cut one trace into sliding windows of ``window`` samples.

    With ``stats`` the derived features are z-scored first.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    n = len(trace)
    if n < window:
        raise ValueError(f"trace {trace.trace_id!r} shorter than window ({n} < {window})")
    f = trace_features(trace, stats)
    starts = np.arange(0, n - window + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(f, window, axis=0)  # [n-T+1, 3, T]
    feats = np.ascontiguousarray(view[starts].transpose(0, 2, 1))
    ends = starts + window - 1
    return WindowedDataset(
        features=feats,
        labels=trace.pos[ends].copy(),
        window_size=window,
        trace_ids=np.array([trace.trace_id] * len(starts), dtype=object),
        end_index=ends,
    )


def windows_from_traces(
    traces: Sequence[Trace], window: int, stats=None, stride: int = 1
) -> WindowedDataset:
    parts = [serialize_windows(tr, window, stride, stats) for tr in traces]
    if not parts:
        raise ValueError("no traces to serialize")
    return WindowedDataset(
        features=np.concatenate([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        window_size=window,
        trace_ids=np.concatenate([p.trace_ids for p in parts]),
        end_index=np.concatenate([p.end_index for p in parts]),
    )


# --------------------------------------------------------------------- resampling


def parse_factor(factor) -> Fraction:
    """Accept ``2``, ``"1/4"``, ``Fraction(1, 4)`` or ``0.25`` and check support."""
    if isinstance(factor, str):
        f = Fraction(factor.strip())
    elif isinstance(factor, float):
        f = Fraction(factor).limit_denominator(8)
    else:
        f = Fraction(factor)
    if f not in SUPPORTED_FACTORS:
        supported = ", ".join(factor_label(s) for s in SUPPORTED_FACTORS)
        raise ValueError(f"unsupported speed factor {factor!r}; supported: {supported}")
    return f


def factor_label(f) -> str:
    f = Fraction(f)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def resample_speed(trace: Trace, factor) -> Trace:
    """Simulate a walk at ``factor`` times the survey speed.

    Speed-ups keep every n-th sample; slow-downs insert ``n - 1`` linearly
    interpolated samples (field and position) between neighbours.  Timestamps
    are re-issued at the trace's nominal rate.
    """
    f = parse_factor(factor)
    if f == 1:
        return trace
    n_orig = len(trace)
    if f.denominator == 1:
        n = f.numerator
        if n_orig < n + 1:
            raise ValueError(f"trace {trace.trace_id!r} needs >= {n + 1} samples for factor {n}")
        m = trace.m[::n]
        pos = trace.pos[::n]
    else:
        n = f.denominator
        frac = (np.arange(n) / n)[None, :, None]  # [1, n, 1]

        def interp(a):
            lo, hi = a[:-1, None, :], a[1:, None, :]
            mid = lo + (hi - lo) * frac
            mid[:, 0, :] = a[:-1]  # originals copied, not recomputed
            return np.concatenate([mid.reshape(-1, a.shape[1]), a[-1:]], axis=0)

        m = interp(trace.m)
        pos = interp(trace.pos)
    t = trace.t[0] + np.arange(len(m)) / trace.rate_hz
    return Trace(t=t, m=m, pos=pos, rate_hz=trace.rate_hz, trace_id=trace.trace_id)


# -------------------------------------------------------------------------- split


def split(datasets: Sequence, ratios=(0.7, 0.2, 0.1), seed: int = 0):
    """Partition whole traces into ``(train, validation, test)``.

    Validation and test sizes are rounded to nearest (at least one trace
    each); the remainder goes to training.  Within a partition the input
    order is preserved.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    items = list(datasets)
    n = len(items)
    if n < 3:
        raise ValueError(f"need at least 3 traces to fill train/validation/test, got {n}")
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} traces are too few for ratios {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    return tuple([items[i] for i in sorted(p)] for p in parts)
