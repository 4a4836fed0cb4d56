# %% [markdown]
# # Scoring a window
#
# An edge scores every cached sample by how unsure its model was (entropy)
# and how recent the sample is (timeliness). It uploads the top share. The
# cloud tracks per-sample correctness in a bounded bank and turns the bank
# into an urgency degree.

# %%
import numpy as np

from edgesync.core import FilterConfig, Sample, validate_probs
from edgesync.filter import (FilterCache, adaptability_score, filter_window, quality_score,
                             timeliness_score)
from edgesync.urgency import (EdgeBank, UrgencyConfig, bank_urgency, batch_accuracies,
                              batch_weights, record_accuracy, select_edge)

rng = np.random.default_rng(0)
cache = FilterCache("cam-0", 0.0)
for i in range(10):
    logits = rng.normal(size=6) * rng.uniform(0.2, 4.0)
    p = np.exp(logits - logits.max())
    cache.append(Sample("cam-0", i, 10.0 * i, tuple(rng.normal(size=4)), 0), validate_probs(p))

cfg = FilterConfig(alpha=1.0, beta=1.0, keep_fraction=0.7, window_seconds=100.0)
now = 100.0
for s, out in cache.entries:
    e = adaptability_score(out)
    t = timeliness_score(now - s.timestamp, cfg.window_seconds)
    print(f"seq {s.seq}  entropy {e:.3f}  timeliness {t:.3f}  quality {quality_score(e, t, cfg):.3f}")

# %% [markdown]
# `ceil(0.7 * 10) = 7` samples survive, highest quality first. Ties go to the
# newer sample.

# %%
kept = filter_window(cache, cfg, now)
print([(k.sample.seq, round(k.quality, 3)) for k in kept])

# %% [markdown]
# The bank holds the last 90 correctness bits and splits them into 10
# batches. Batch 0 is the reference. Later batches that do worse add to the
# urgency, weighted more heavily the later they come.

# %%
ucfg = UrgencyConfig()
print("weights", np.round(batch_weights(ucfg.batch_count_m, ucfg.tm), 3))

steady, drifting = EdgeBank("steady"), EdgeBank("drifting")
for i in range(90):
    record_accuracy(steady, int(rng.random() < 0.9), i)
    record_accuracy(drifting, int(rng.random() < (0.9 if i < 30 else 0.4)), i)
for bank in (steady, drifting):
    print(bank.edge_id, batch_accuracies(bank, ucfg), round(bank_urgency(bank, ucfg), 2))

degrees = {b.edge_id: bank_urgency(b, ucfg) for b in (steady, drifting)}
print("next to train:", select_edge(degrees))
