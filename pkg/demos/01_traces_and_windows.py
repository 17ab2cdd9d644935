"""
From magnetometer traces to training windows
============================================

A walk through ``magloc.magdata``: load a trace, turn the raw field into the
rotation-invariant feature triple, normalize it, cut sliding windows and
change the apparent walking speed.
"""

# %%
# A synthetic trace stands in for a phone recording.  ``simworld`` gives us
# a field with a couple of dozen anomalies and a walker around a block.
import tempfile
from pathlib import Path

import numpy as np

from magloc import magdata, simworld

world = simworld.random_world(24, ((-2, 22), (-2, 14)), seed=7)
trace = simworld.walk(world, simworld.WalkConfig(simworld.rectangle_loop(20, 12), 1.0, 20, 0.5, seed=1, trace_id="loop"))
print(f"{len(trace)} samples at {trace.rate_hz:g} Hz, {trace.t[-1]:.1f} s")

# %%
# Traces live on disk as plain CSV, one file per walk.  Values are written
# with ``repr`` so reloading is bit-exact.
out = Path(tempfile.mkdtemp())
magdata.write_trace(trace, out / "loop.csv")
print((out / "loop.csv").read_text().splitlines()[:3])
(back,) = magdata.load_traces(out)
assert back == trace

# %%
# The model never sees (mx, my, mz) directly.  It sees m_z, the horizontal
# magnitude and the total magnitude, which do not change when the phone
# turns about the vertical axis.
feats = magdata.derive_features(trace.m)
print("first feature rows:\n", feats[:3].round(3))
print(magdata.derive_features(np.array([1.0, 2.0, 2.0])))

# %%
# Normalization statistics come from training traces only and are then
# reused for everything else.
stats = magdata.fit_normalizer([trace])
z = magdata.trace_features(trace, stats)
print("mean", z.mean(axis=0).round(12), "sd", z.std(axis=0).round(12))

# %%
# Windows of T samples with stride 1.  Each label is the position of the
# window's last sample.
ds = magdata.serialize_windows(trace, 32, stats=stats)
print(ds.features.shape, ds.labels.shape)
assert len(ds) == len(trace) - 32 + 1
np.testing.assert_array_equal(ds.labels[0], trace.pos[31])

# %%
# Speed changes.  Factor 3 keeps every third sample, so the same corridor
# goes by three times as fast.  Factor 1/3 interpolates two samples between
# each pair.  Going slow and then fast again returns the original trace.
fast = magdata.resample_speed(trace, 3)
slow = magdata.resample_speed(trace, "1/3")
print(len(trace), len(fast), len(slow))
assert magdata.resample_speed(slow, 3) == trace

# %%
# Splits happen per trace, never per window, so overlapping windows cannot
# leak between training and test.
walks = [
    simworld.walk(world, simworld.WalkConfig(simworld.rectangle_loop(20, 12), 1.0, 20, 0.5, seed=s, trace_id=f"w{s}"))
    for s in range(6)
]
tr, va, te = magdata.split(walks, (0.6, 0.2, 0.2), seed=0)
print([t.trace_id for t in tr], [t.trace_id for t in va], [t.trace_id for t in te])
