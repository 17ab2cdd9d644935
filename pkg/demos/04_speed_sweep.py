"""
Walking faster than the fingerprints were recorded
==================================================

DTW matches a query window against reference windows recorded at a fixed
pace.  When the user walks three times faster, a T-sample query covers three
times the ground and no reference looks like it.  A network trained on a
few paces loses a smaller fraction of its accuracy.  This script shows the
contrast on a small synthetic loop; compare each column's rows against its
own factor-1 entry.
"""

# %%
from magloc import evalsuite, magdata, simworld
from magloc.neuralnet import ModelSpec
from magloc.train import TrainConfig, fit_output_scaling, train

world = simworld.random_world(20, ((-2, 12), (-2, 8)), seed=3)
loop = simworld.rectangle_loop(10, 6)
ref, val, test = (
    simworld.walk(world, simworld.WalkConfig(loop, 1.0, 20, 0.5, seed=s, trace_id=n))
    for s, n in ((1, "ref"), (2, "val"), (3, "test"))
)

# %%
# Training data and the DTW database both contain the reference walk at
# half, normal and double speed.
paces = ["1/2", "1", "2"]
augmented = [magdata.resample_speed(ref, f) for f in paces]
T = 16
stats = magdata.fit_normalizer([ref])
db = evalsuite.build_fingerprint_db(augmented, stats, T)

spec = ModelSpec("MSTL", T=T, K=4, M=10, hidden=32)
train_ds = magdata.windows_from_traces(augmented, T, stats)
val_ds = magdata.windows_from_traces([magdata.resample_speed(val, f) for f in paces], T, stats)
spec = fit_output_scaling(spec, train_ds.labels)
params, _ = train(spec, train_ds, val_ds, TrainConfig(learning_rate=2e-3, max_epochs=25, patience=6))

# %%
# Sweep the test walk over a range of paces.  ``stride`` thins the DTW
# queries, which are the slow part.
factors = ["1/2", "1", "2", "3", "4"]
dtw = evalsuite.speed_sweep(evalsuite.dtw_predictor(db), [test], factors, stats, T, stride=4)
mstl = evalsuite.speed_sweep(evalsuite.model_predictor(spec, params), [test], factors, stats, T)

print("factor   DTW mean   MSTL mean")
for f in factors:
    print(f"{f:>6} {dtw[f].mean:10.2f} {mstl[f].mean:11.2f}")

# %%
# The same table is what ``magloc sweep`` writes as JSON.
print(evalsuite.sweep_to_json({"3": mstl["3"]})[:120], "...")
