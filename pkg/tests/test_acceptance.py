"""Acceptance criteria, one check per criterion.

Every check returns ``(passed, detail)``. The test prints one
``CRITERION n PASS|FAIL`` line per criterion and the conftest repeats the
lines in the terminal summary. Criteria that fail honestly are listed in
``KNOWN_FAILURES`` with the reason; their test asserts the documented
outcome, so a criterion that starts passing (or a new failure) turns the
suite red. Run ``python tests/test_acceptance.py`` for the lines alone.
"""

from __future__ import annotations

import math
import random
import time
from collections import defaultdict

import numpy as np
import pytest

from edgesync.bho import BhoConfig, GPModel, bho_optimize, expected_improvement
from edgesync.clock import SimClock
from edgesync.cli import harness_main
from edgesync.cloud import Coordinator
from edgesync.core import FilterConfig, HyperParams, Sample, validate_probs
from edgesync.edge import EdgeAgent
from edgesync.filter import (FilterCache, adaptability_score, filter_window, keep_count,
                             quality_score, timeliness_score)
from edgesync.harness import (SimConfig, Strategy, make_workloads, run_experiment,
                              sweep_edge_count, sweep_filter_fraction)
from edgesync.modelkit import SceneGenerator, StudentModel
from edgesync.proto import ModelUpdate, SampleBatch, WireSample, decode, encode
from edgesync.trainer import StopReason, TrainerConfig, train_until_stop
from edgesync.urgency import EdgeBank, UrgencyConfig, bank_urgency, record_accuracy

try:
    from oracles import (central_difference, entropy, expected_improvement as ei_oracle,
                         gp_posterior, softmax_loss, timeliness, topk_by_hand,
                         urgency as urgency_oracle)
except ImportError:  # run as a script from the repository root
    import sys
    from pathlib import Path
    sys.path.insert(0, str(Path(__file__).parent))
    from oracles import (central_difference, entropy, expected_improvement as ei_oracle,
                         gp_posterior, softmax_loss, timeliness, topk_by_hand,
                         urgency as urgency_oracle)

SEEDS = range(5)
MAJORITY = 3
LINES: list[str] = []

KNOWN_FAILURES = {
    6: "budget-matched FixedInterval is within 2 points of EdgeSync in 3 of 5 seeds; "
       "the 30-epoch comparator (twice the training time) is beaten in 5 of 5",
    8: "keep fraction 0.2 beats every interior fraction in 3 of 5 seeds with the default "
       "accumulating 2000-sample buffer; a window-only comparator passes 5 of 5",
}


# ---------------------------------------------------------------------------
# 1. scoring math against independent oracles


def criterion_1():
    t0 = time.perf_counter()
    rng = random.Random(1)
    worst = 0.0
    for _ in range(2000):
        c = rng.randint(1, 10)
        raw = [rng.choice([0.0, rng.random(), 1.0]) for _ in range(c)]
        if sum(raw) == 0:
            raw[0] = 1.0
        out = validate_probs(raw)
        e = adaptability_score(out)
        worst = max(worst, abs(e - min(max(entropy(out.probs), 0.0), math.log(c))))
        # the oracle's exp overflows past age/window = 700
        age, window = rng.uniform(0, 500), rng.uniform(1.0, 100)
        t = timeliness_score(age, window)
        worst = max(worst, abs(t - timeliness(age, window)))
        cfg = FilterConfig(rng.uniform(0, 3), rng.uniform(0, 3))
        q = quality_score(e, t, cfg)
        worst = max(worst, abs(q - (cfg.alpha * entropy(out.probs)
                                    + cfg.beta * timeliness(age, window))))
    for _ in range(500):
        m = rng.choice([1, 2, 5, 10])
        n = m * rng.randint(1, 12)
        tm = rng.choice([None, 2.0, 7.5])
        bits = [int(rng.random() < 0.6) for _ in range(rng.randint(0, 2 * n))]
        bank = EdgeBank("e", n)
        for i, b in enumerate(bits):
            record_accuracy(bank, b, i)
        worst = max(worst, abs(bank_urgency(bank, UrgencyConfig(n, m, tm))
                               - urgency_oracle(bits, n, m, tm)))
    for _ in range(2000):
        mu, var, best = rng.uniform(-5, 5), rng.uniform(0, 10), rng.uniform(-5, 5)
        worst = max(worst, abs(expected_improvement(mu, var, best) - ei_oracle(mu, var, best)))
    nrng = np.random.default_rng(0)
    for _ in range(50):
        n = int(nrng.integers(1, 21))
        ls, v, noise = nrng.uniform(0.1, 1), nrng.uniform(0.5, 2), nrng.uniform(1e-3, 0.1)
        X, y, Q = nrng.random((n, 3)), nrng.normal(size=n), nrng.random((10, 3))
        gp = GPModel(kernel_lengthscale=ls, kernel_variance=v, noise_variance=noise)
        for p, val in zip(X, y):
            gp.add(p, val)
        m_, s_ = gp.predict(Q)
        mo, so = gp_posterior(X, y, Q, ls, v, noise)
        worst = max(worst, float(np.max(np.abs(m_ - mo))), float(np.max(np.abs(s_ - so))))
    elapsed = time.perf_counter() - t0
    return worst <= 1e-8 and elapsed < 10, f"max |err| {worst:.2e}, {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 2. filter contract on fuzzed caches


def _fuzz_cache(rng, n):
    c = FilterCache("e", 0.0)
    for i in range(n):
        p = [rng.choice([0.0, 0.5, 1.0, rng.random()]) for _ in range(3)]
        if sum(p) == 0:
            p[0] = 1.0
        c.append(Sample("e", i, rng.choice([0.0, float(i), rng.uniform(0, 50)]), (0.0,), 0),
                 validate_probs(p))
    return c


def criterion_2():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    bad = 0
    for trial in range(1000):
        n = rng.randint(1, 40)
        k = rng.choice([0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0, rng.uniform(0.01, 1.0)])
        cfg = FilterConfig(rng.choice([0.0, 1.0, 2.5]), rng.choice([0.0, 1.0]), k, 25.0)
        c = _fuzz_cache(rng, n)
        entries = list(c.entries)
        kept = filter_window(c, cfg, 60.0)
        quals = [cfg.alpha * entropy(o.probs) + cfg.beta * timeliness(60.0 - s.timestamp, 25.0)
                 for s, o in entries]
        impl = {x.sample.seq: x.quality for x in kept}
        seqs = [s.seq for s, _ in entries]
        ok = len(kept) == keep_count(n, k) == max(1, math.ceil(round(k * n, 9)))
        ok &= all(a.quality >= b.quality for a, b in zip(kept, kept[1:]))
        ok &= all(abs(impl[s] - q) <= 1e-8 for s, q in zip(seqs, quals) if s in impl)
        full = filter_window(_refill(entries), FilterConfig(cfg.alpha, cfg.beta, 1.0, 25.0), 60.0)
        qmap = {x.sample.seq: x.quality for x in full}
        want = [seqs[i] for i in topk_by_hand([qmap[s] for s in seqs], seqs, k)]
        ok &= [x.sample.seq for x in kept] == want
        shuffled = entries[:]
        rng.shuffle(shuffled)
        again = filter_window(_refill(sorted(shuffled, key=lambda e: e[0].seq)), cfg, 60.0)
        ok &= again == kept
        bad += not ok
    elapsed = time.perf_counter() - t0
    return bad == 0 and elapsed < 30, f"{1000 - bad}/1000 caches satisfy the contract, " \
                                      f"{elapsed:.1f} s"


def _refill(entries):
    c = FilterCache("e", 0.0)
    for s, o in entries:
        c.append(s, o)
    return c


# ---------------------------------------------------------------------------
# 3. training-loop traces


class _Scripted:
    def __init__(self, evals, clock=None, epoch_seconds=0.0):
        self.evals, self.epoch, self.w = list(evals), 0, np.zeros(3)
        self.clock, self.epoch_seconds = clock, epoch_seconds

    def train_epoch(self, X, y, h):
        self.epoch += 1
        self.w = np.full(3, float(self.epoch))
        if self.clock is not None:
            self.clock.spend(self.epoch_seconds)
        return 0.0

    def evaluate(self, X, y):
        return self.evals[min(self.epoch, len(self.evals)) - 1]

    def get_trainable(self):
        return self.w.copy()

    def set_trainable(self, values):
        self.w = np.array(values, dtype=float)


def criterion_3():
    X, Y = np.zeros((10, 2)), np.zeros(10, dtype=int)
    checks = []
    m = _Scripted([0.5] + [0.6] * 9)
    r = train_until_stop(m, X, Y, TrainerConfig(patience_k=5), SimClock())
    checks.append((r.epochs_run, r.best_epoch, r.stop_reason, m.w[0]) ==
                  (8, 2, StopReason.PATIENCE, 2.0))
    for k in (1, 3, 7):
        r = train_until_stop(_Scripted([0.4]), X, Y, TrainerConfig(patience_k=k), SimClock())
        checks.append(r.epochs_run == k + 2)
    clock = SimClock()
    m = _Scripted([i / 100 for i in range(1, 100)], clock, 1.0)
    r = train_until_stop(m, X, Y, TrainerConfig(patience_k=5, max_time=3.5), clock)
    checks.append((r.epochs_run, r.stop_reason, m.w[0]) == (4, StopReason.TIME_CAP, 4.0))
    rng = random.Random(3)
    adversarial = 0
    for _ in range(500):
        k = rng.randint(1, 6)
        evals = [rng.choice([0.0, 0.3, 0.5, 0.9, rng.random()]) for _ in range(30)]
        m = _Scripted(evals)
        r = train_until_stop(m, X, Y, TrainerConfig(patience_k=k), SimClock())
        best = max([0.0] + r.evaluations)
        first = r.evaluations.index(best) + 1 if best > 0 else 0
        adversarial += (r.best_eval == best and r.best_epoch == first
                        and m.w[0] == float(first) and r.epochs_run - first == k + 1)
    checks.append(adversarial == 500)
    return all(checks), f"{sum(checks)}/{len(checks)} traces exact, checkpoint property " \
                        f"{adversarial}/500"


# ---------------------------------------------------------------------------
# 4. gradient check


def criterion_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(100):
        C, hid, fd = int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 6))
        m = StudentModel.create(fd, hid, C, seed=trial)
        W = rng.standard_normal((C, hid + 1))
        X = rng.standard_normal((int(rng.integers(1, 9)), fd))
        y = rng.integers(0, C, len(X))
        wd = float(rng.choice([0.0, 1e-3, 0.1]))
        H = m.hidden(X)[:, :-1]
        _, g = m.loss_and_grad(X, y, wd, W=W)
        num = central_difference(lambda V: softmax_loss(V, H, y, wd), W)
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num),
                                                          1e-12))
    elapsed = time.perf_counter() - t0
    return worst < 1e-5 and elapsed < 30, f"max relative error {worst:.2e}, {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 5. BHO on the embedded quadratic


def criterion_5():
    t0 = time.perf_counter()
    grid = (np.arange(10_000) + 0.5) / 10_000
    target = grid[int(np.argmax(-(grid - 0.3) ** 2))]
    errs, evals = [], []
    for seed in SEEDS:
        res = bho_optimize(lambda u: -(u[0] - 0.3) ** 2, BhoConfig(max_evaluations=25, seed=seed))
        errs.append(abs(res.best_point[0] - target))
        evals.append(len(res.trace))
    elapsed = time.perf_counter() - t0
    ok = all(e <= 0.05 for e in errs) and max(evals) <= 25 and elapsed < 60
    return ok, f"|best - grid optimum| max {max(errs):.4f} over 5 seeds, " \
               f"<= {max(evals)} evaluations, {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 6. drift recovery on the default workload


def _train_seconds(rep):
    return sum(c["train_seconds"] for c in rep.cycles)


def _budget_matched_fixed(workloads, seed, budget):
    """FixedInterval whose total training time is closest to ``budget``."""
    best = None
    for epochs in range(1, 31):
        rep = run_experiment(Strategy.FIXED_INTERVAL, workloads, SimConfig(fixed_epochs=epochs),
                             seed)
        gap = abs(_train_seconds(rep) - budget)
        if best is None or gap < best[0]:
            best = (gap, epochs, rep)
        if _train_seconds(rep) > budget * 1.5:
            break
    return best[1], best[2]


def criterion_6():
    t0 = time.perf_counter()
    wins = 0
    parts, long_wins = [], 0
    for seed in SEEDS:
        w = make_workloads(SceneGenerator(), 2, seed)
        es = run_experiment(Strategy.EDGESYNC, w, SimConfig(), seed)
        na = run_experiment(Strategy.NO_ADAPTATION, w, SimConfig(), seed)
        fx30 = run_experiment(Strategy.FIXED_INTERVAL, w, SimConfig(), seed)
        epochs, fx = _budget_matched_fixed(w, seed, _train_seconds(es))
        a, b, c = es.overall_accuracy, na.overall_accuracy, fx.overall_accuracy
        ok = a - b >= 0.10 and a - c >= 0.02
        wins += ok
        long_wins += a - b >= 0.10 and a - fx30.overall_accuracy >= 0.02
        parts.append(f"s{seed}: ES {a:.3f} NA {b:.3f} FI[{epochs}ep] {c:.3f}")
    elapsed = time.perf_counter() - t0
    detail = (f"{wins}/5 seeds ({'; '.join(parts)}); vs 30-epoch FI {long_wins}/5; "
              f"{elapsed:.0f} s")
    return wins >= MAJORITY and elapsed < 300, detail


# ---------------------------------------------------------------------------
# 7. urgency targets the drifting edge


def criterion_7():
    drift_sel = total = 0
    for seed in SEEDS:
        drift = SceneGenerator(scene_durations=(50.0,) * 20).build(seed * 1009, "edge-drift")
        stat = SceneGenerator(scene_durations=(1000.0,), separation=2.0).build(seed * 1009 + 1,
                                                                               "edge-stat")
        rep = run_experiment(Strategy.EDGESYNC, [drift, stat], SimConfig(), seed)
        sel = [c["selected"] for c in rep.cycles if c["selected"] is not None]
        drift_sel += sum(s == "edge-drift" for s in sel)
        total += len(sel)
    share = drift_sel / total
    return share >= 0.8, f"{drift_sel}/{total} training cycles ({share:.1%}) on the drifting edge"


# ---------------------------------------------------------------------------
# 8. filter-ratio sweep


def criterion_8():
    fractions = [0.2, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    rows = sweep_filter_fraction(fractions, SEEDS, update_interval=100.0)
    by = defaultdict(dict)
    for r in rows:
        by[r["seed"]][r["fraction"]] = r["accuracy"]
    wins, parts = 0, []
    for seed, acc in sorted(by.items()):
        interior = max((acc[f], f) for f in fractions if 0.5 <= f <= 0.9)
        ok = interior[0] > acc[0.2] and interior[0] > acc[1.0]
        wins += ok
        parts.append(f"s{seed}: best interior {interior[1]}={interior[0]:.3f} "
                     f"0.2={acc[0.2]:.3f} 1.0={acc[1.0]:.3f}")
    return wins >= MAJORITY, f"{wins}/5 seeds ({'; '.join(parts)})"


# ---------------------------------------------------------------------------
# 9. scaling with edge count


def criterion_9():
    counts = [1, 2, 4, 7]
    rows = sweep_edge_count(counts, SEEDS)
    acc = defaultdict(dict)
    for r in rows:
        acc[(r["seed"], r["strategy"])][r["edges"]] = r["accuracy"]
    wins, parts = 0, []
    for seed in SEEDS:
        es = [acc[(seed, "edgesync")][n] for n in counts]
        fi = [acc[(seed, "fixed_interval")][n] for n in counts]
        monotone = all(a >= b for a, b in zip(es, es[1:]))
        ok = monotone and es[0] - es[-1] < fi[0] - fi[-1]
        wins += ok
        parts.append(f"s{seed}: ES drop {es[0] - es[-1]:.3f}{'' if monotone else ' (not monotone)'}"
                     f" FI drop {fi[0] - fi[-1]:.3f}")
    return wins >= MAJORITY, f"{wins}/5 seeds ({'; '.join(parts)})"


# ---------------------------------------------------------------------------
# 10. protocol fuzz and bitwise update application


def _random_message(rng):
    def f():
        return rng.choice([0.0, -0.0, rng.uniform(-1e6, 1e6), rng.gauss(0, 1e-300), 5e-324])

    kind = rng.randrange(2)
    if kind == 0:
        samples = []
        for _ in range(rng.randint(1, 4)):
            probs = tuple(f() for _ in range(rng.randint(1, 6)))
            samples.append(WireSample(rng.getrandbits(64), f(),
                                      tuple(f() for _ in range(rng.randint(0, 6))), probs,
                                      rng.randrange(len(probs))))
        return SampleBatch("e" * rng.randint(0, 5), rng.getrandbits(64), tuple(samples))
    return ModelUpdate("ü" * rng.randint(0, 5), rng.getrandbits(64),
                       tuple(f() for _ in range(rng.randint(0, 40))))


def criterion_10():
    rng = random.Random(10)
    exact = 0
    for _ in range(10_000):
        msg = _random_message(rng)
        back = decode(encode(msg))
        exact += back == msg and type(back) is type(msg) and encode(back) == encode(msg)
    # one real coordinator update travelling to an edge
    base = StudentModel.create(seed=0)
    coord = Coordinator(base, TrainerConfig(patience_k=3, hyperparams=HyperParams(0.05, 0.9, 1e-4)),
                        UrgencyConfig(), lambda e, q, f: q % 6)
    coord.add_edge("a")
    agent = EdgeAgent("a", base.copy(), FilterConfig())
    nrng = np.random.default_rng(0)
    samples = []
    for s in range(90):
        x = np.zeros(16)
        x[s % 6] = 4.0
        pred = (s % 6 + 1) % 6 if s >= 45 else s % 6
        probs = [0.1] * 6
        probs[pred] = 0.5
        samples.append(WireSample(s, 0.5 * s, tuple((x + nrng.standard_normal(16) * 0.3).tolist()),
                                  tuple(probs), pred))
    coord.ingest_batch(SampleBatch("a", 0, tuple(samples)))
    rec = coord.run_cycle()
    agent.apply_update(decode(encode(rec.update)))
    bitwise = agent.model.get_trainable().tobytes() == coord.edges["a"].model.get_trainable().tobytes()
    return exact == 10_000 and bitwise, f"{exact}/10000 exact round trips, applied update " \
                                        f"{'bitwise equal' if bitwise else 'differs'}"


# ---------------------------------------------------------------------------
# 11. determinism of `harness run`


def criterion_11(tmp_dir):
    same = 0
    for s in Strategy:
        outs = []
        for k in range(2):
            d = tmp_dir / f"{s.value}-{k}"
            harness_main(["run", "--strategy", s.value, "--seed", "7", "--out", str(d)])
            outs.append((d / "report.json").read_bytes())
        same += outs[0] == outs[1]
    return same == len(Strategy), f"{same}/{len(Strategy)} strategies byte-identical"


# ---------------------------------------------------------------------------
# 12. cycle-time accounting


def criterion_12():
    ok, parts = True, []
    for seed in SEEDS:
        w = make_workloads(SceneGenerator(), 2, seed)
        es = run_experiment(Strategy.EDGESYNC, w, SimConfig(), seed)
        fx = run_experiment(Strategy.FIXED_INTERVAL, w, SimConfig(fixed_epochs=30), seed)
        busy = [c for c in es.cycles if c["version"] is not None]
        share = max(c["profiling_seconds"] / (c["end"] - c["start"]) for c in busy)
        t_es = es.time_decomposition["total_seconds"]
        t_fx = fx.time_decomposition["total_seconds"]
        ok &= share < 1e-3 and t_es < t_fx
        parts.append(f"s{seed}: cycle {t_es:.1f} s vs {t_fx:.1f} s, profiling <= {share:.1e}")
    return ok, "; ".join(parts)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
            11: criterion_11, 12: criterion_12}


def _report(n, passed, detail):
    line = f"CRITERION {n:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    LINES.append(line)
    print(line)
    return line


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, tmp_path):
    fn = CRITERIA[n]
    passed, detail = fn(tmp_path) if n == 11 else fn()
    _report(n, passed, detail)
    if n in KNOWN_FAILURES:
        assert not passed, f"criterion {n} now passes; update KNOWN_FAILURES and the notes"
    else:
        assert passed, detail


if __name__ == "__main__":
    import tempfile
    from pathlib import Path
    for n, fn in CRITERIA.items():
        with tempfile.TemporaryDirectory() as d:
            _report(n, *(fn(Path(d)) if n == 11 else fn()))
