# %% [markdown]
# # Sweeps and offline profiling
#
# Smaller versions of the filter-ratio and edge-count sweeps, followed by
# one offline profiling run that produces h_0. The full five-seed versions
# run in `tests/test_acceptance.py` and through `harness sweep-filter` and
# `harness sweep-edges`.

# %%
from collections import defaultdict

import numpy as np

from edgesync.bho import BhoConfig, RefineConfig
from edgesync.core import HyperParams
from edgesync.harness import (ProfileConfig, SimConfig, make_workloads, profile_offline,
                              run_experiment, sweep_edge_count, sweep_filter_fraction)
from edgesync.modelkit import SceneGenerator
from edgesync.trainer import TrainerConfig

# %% [markdown]
# Keep fraction at a fixed 100 s update interval. Bytes shrink in proportion
# to the fraction. Keeping everything is never best here. Across five seeds
# the peak lands at 0.5 in two and at 0.2 in three, because the accumulated
# buffer already holds plenty of data and the uncertain samples carry the
# signal.

# %%
rows = sweep_filter_fraction([0.2, 0.5, 0.7, 1.0], [0, 1])
table = defaultdict(list)
for r in rows:
    table[r["fraction"]].append((r["accuracy"], r["bytes_uploaded"]))
for f, vals in table.items():
    acc, nbytes = np.mean(vals, axis=0)
    print(f"keep {f:.1f}  accuracy {acc:.3f}  bytes {nbytes:9.0f}")

# %% [markdown]
# More edges share one cloud. FixedInterval trains every edge every round, so
# a round takes longer as edges are added. EdgeSync trains one edge per cycle,
# picked by urgency.

# %%
rows = sweep_edge_count([1, 2, 4], [0])
for r in rows:
    print(f"{r['strategy']:15s} edges {r['edges']}  accuracy {r['accuracy']:.3f}  "
          f"updates {r['updates']}")

# %% [markdown]
# Offline profiling runs one BHO search per workload. The per-workload bests
# are averaged in normalised space and then refined on mini-batches. A small
# budget keeps this cell under a minute.

# %%
cfg = ProfileConfig(BhoConfig(max_evaluations=10, init_random_points=4),
                    RefineConfig(segment_length=200), objective_epochs=8, segments=2)
profile = profile_offline(make_workloads(SceneGenerator(), 2, 0), cfg)
for w in profile["workloads"]:
    print(w["edge_id"], {k: round(float(v), 5) for k, v in w["best_hyperparams"].items()},
          round(w["best_value"], 3))
print("mean   ", {k: round(float(v), 5) for k, v in profile["h_mean"].items()})
print("h0     ", {k: round(float(v), 5) for k, v in profile["h0"].items()})

# %% [markdown]
# Compare the profiled h_0 with an untuned default on held-out workloads.

# %%
held_out = make_workloads(SceneGenerator(), 2, 9)
for name, h in (("untuned", HyperParams(0.05, 0.0, 0.0)),
                ("profiled", HyperParams.from_dict(profile["h0"]))):
    sim = SimConfig(trainer=TrainerConfig(hyperparams=h))
    rep = run_experiment("edgesync", held_out, sim, 9)
    print(f"{name:8s} accuracy {rep.overall_accuracy:.3f}")
