"""Synthetic indoor magnetic fields and constant-speed walkers.

The field is a uniform background plus Gaussian bumps.  Placing bumps with
similar amplitudes in different corridors reproduces the ambiguity of
single-sample magnetic fingerprints while sequences stay distinguishable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .magdata import Trace


@dataclass(frozen=True)
class Anomaly:
    center: tuple
    amplitude: tuple
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"anomaly width must be > 0, got {self.width}")


@dataclass(frozen=True)
class FieldModel:
    background: tuple = (20.0, 0.0, -45.0)
    anomalies: tuple = ()
    seed: int | None = None

    def to_dict(self):
        return {
            "background": list(map(float, self.background)),
            "anomalies": [
                {
                    "center": list(map(float, a.center)),
                    "amplitude": list(map(float, a.amplitude)),
                    "width": float(a.width),
                }
                for a in self.anomalies
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            background=tuple(d["background"]),
            anomalies=tuple(
                Anomaly(tuple(a["center"]), tuple(a["amplitude"]), float(a["width"]))
                for a in d.get("anomalies", [])
            ),
            seed=d.get("seed"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def random_world(
    n_anomalies=24,
    extent=((0.0, 20.0), (0.0, 12.0)),
    amplitude=15.0,
    width=(1.0, 2.5),
    background=(20.0, 0.0, -45.0),
    seed=0,
) -> FieldModel:
    """Scatter ``n_anomalies`` bumps uniformly over ``extent``.

    Amplitudes are uniform in ``[-amplitude, amplitude]`` per axis and widths
    uniform in ``width``.
    """
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = extent
    anomalies = tuple(
        Anomaly(
            center=(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))),
            amplitude=tuple(float(v) for v in rng.uniform(-amplitude, amplitude, 3)),
            width=float(rng.uniform(*width)),
        )
        for _ in range(n_anomalies)
    )
    return FieldModel(tuple(map(float, background)), anomalies, seed)


def sample_field(world: FieldModel, pos) -> np.ndarray:
    """Field vector(s) in microtesla at planar position(s) ``pos`` ``[..., 2]``."""
    pos = np.asarray(pos, dtype=float)
    out = np.broadcast_to(np.asarray(world.background, dtype=float), pos.shape[:-1] + (3,)).copy()
    for a in world.anomalies:
        d2 = ((pos - np.asarray(a.center)) ** 2).sum(axis=-1)
        out += np.exp(-d2 / (2.0 * a.width**2))[..., None] * np.asarray(a.amplitude)
    return out


@dataclass(frozen=True)
class WalkConfig:
    waypoints: tuple
    speed: float = 1.0
    rate_hz: float = 20.0
    noise_sd: float = 0.0
    seed: int = 0
    trace_id: str = "walk"

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ValueError("a walk needs at least two 2-D waypoints")
        if (np.linalg.norm(np.diff(wp, axis=0), axis=1) == 0).any():
            raise ValueError("consecutive waypoints must be distinct")
        if not (self.speed > 0 and self.rate_hz > 0 and self.noise_sd >= 0):
            raise ValueError("speed and rate_hz must be > 0, noise_sd >= 0")
        object.__setattr__(self, "waypoints", tuple(tuple(map(float, p)) for p in wp))

    def to_dict(self):
        return {
            "waypoints": [list(p) for p in self.waypoints],
            "speed": self.speed,
            "rate_hz": self.rate_hz,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
            "trace_id": self.trace_id,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["waypoints"] = tuple(tuple(p) for p in d["waypoints"])
        return cls(**d)


def load_walks(path) -> list[WalkConfig]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data["walks"]
    return [WalkConfig.from_dict(d) for d in data]


def polyline_points(waypoints, arclength) -> np.ndarray:
    """Points at the given arc lengths along a polyline (clamped to its ends)."""
    wp = np.asarray(waypoints, dtype=float)
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.clip(np.asarray(arclength, dtype=float), 0.0, cum[-1])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    return wp[k] + frac[:, None] * seg[k]


def walk(world: FieldModel, cfg: WalkConfig) -> Trace:
    """Sample the field at ``rate_hz`` while moving along the waypoints at ``speed``.

    Positions are exact; Gaussian noise of ``noise_sd`` is added to each field
    axis.
    """
    wp = np.asarray(cfg.waypoints)
    total = float(np.linalg.norm(np.diff(wp, axis=0), axis=1).sum())
    # i * v / rate (not i * (v / rate)) keeps walks at v and 2v on identical points
    n = int(np.floor(total * cfg.rate_hz / cfg.speed + 1e-9)) + 1
    i = np.arange(n)
    s = i * cfg.speed / cfg.rate_hz
    pos = polyline_points(wp, s)
    m = sample_field(world, pos)
    if cfg.noise_sd > 0:
        m = m + np.random.default_rng(cfg.seed).normal(0.0, cfg.noise_sd, m.shape)
    return Trace(t=i / cfg.rate_hz, m=m, pos=pos, rate_hz=cfg.rate_hz, trace_id=cfg.trace_id)


def rectangle_loop(width=20.0, height=12.0, origin=(0.0, 0.0)):
    """Four-corridor closed path around a ``width`` x ``height`` block."""
    x0, y0 = origin
    return (
        (x0, y0),
        (x0 + width, y0),
        (x0 + width, y0 + height),
        (x0, y0 + height),
        (x0, y0),
    )
