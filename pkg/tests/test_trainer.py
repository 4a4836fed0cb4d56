import random

import numpy as np
import pytest

from edgesync.clock import SimClock
from edgesync.core import HyperParams, InvariantError
from edgesync.modelkit import StudentModel
from edgesync.trainer import (EmptyTrainSetError, ModelRejectedHyperparamsError, StopReason,
                              TrainerConfig, freeze_partition, holdout_split, train_fixed_epochs,
                              train_until_stop)


class ScriptedModel:
    """Stub whose evaluations follow a script; the weights record the epoch."""

    def __init__(self, evals, clock=None, epoch_seconds=0.0):
        self.evals = list(evals)
        self.epoch = 0
        self.w = np.zeros(3)
        self.clock = clock
        self.epoch_seconds = epoch_seconds

    def train_epoch(self, X, y, h):
        self.epoch += 1
        self.w = np.full(3, float(self.epoch))
        if self.clock is not None:
            self.clock.spend(self.epoch_seconds)
        return 1.0 / self.epoch

    def evaluate(self, X, y):
        return self.evals[self.epoch - 1] if self.epoch <= len(self.evals) else self.evals[-1]

    def get_trainable(self):
        return self.w.copy()

    def set_trainable(self, values):
        self.w = np.array(values, dtype=float)


X = np.zeros((10, 2))
Y = np.zeros(10, dtype=int)


def test_patience_trace_eight_epochs():
    m = ScriptedModel([0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6])
    rep = train_until_stop(m, X, Y, TrainerConfig(patience_k=5), SimClock())
    assert rep.epochs_run == 8
    assert rep.best_eval == 0.6 and rep.best_epoch == 2
    assert rep.stop_reason is StopReason.PATIENCE
    assert np.array_equal(m.w, np.full(3, 2.0))


@pytest.mark.parametrize("k", [1, 2, 5, 9])
def test_constant_eval_runs_patience_plus_two(k):
    m = ScriptedModel([0.4])
    rep = train_until_stop(m, X, Y, TrainerConfig(patience_k=k), SimClock())
    assert rep.epochs_run == k + 2 and rep.best_epoch == 1
    assert rep.stop_reason is StopReason.PATIENCE


def test_time_cap_dominates_improving_run():
    clock = SimClock()
    m = ScriptedModel([i / 100 for i in range(1, 100)], clock, epoch_seconds=1.0)
    rep = train_until_stop(m, X, Y, TrainerConfig(patience_k=5, max_time=3.5), clock)
    assert rep.stop_reason is StopReason.TIME_CAP
    # checks at t = 0, 1, 2, 3 pass; t = 4 >= 3.5 stops
    assert rep.epochs_run == 4 and rep.best_epoch == 4
    assert rep.wall_seconds == 4.0


def test_time_cap_boundary_is_inclusive():
    clock = SimClock()
    m = ScriptedModel([i / 100 for i in range(1, 100)], clock, epoch_seconds=1.0)
    rep = train_until_stop(m, X, Y, TrainerConfig(max_time=3.0), clock)
    assert rep.epochs_run == 3 and rep.stop_reason is StopReason.TIME_CAP


def _trace(evals, k):
    # reference loop: epochs from 1, strict improvement, stop when epoch - best > k
    best, best_epoch, epoch = 0.0, 0, 0
    while epoch - best_epoch <= k:
        e = evals[epoch] if epoch < len(evals) else evals[-1]
        epoch += 1
        if e > best:
            best, best_epoch = e, epoch
    return epoch, best_epoch, best


def test_checkpoint_property_under_adversarial_evals():
    rng = random.Random(99)
    for _ in range(500):
        k = rng.randint(1, 6)
        evals = [rng.choice([0.0, 0.3, 0.5, 0.5, 0.9, rng.random()]) for _ in range(30)]
        m = ScriptedModel(evals)
        rep = train_until_stop(m, X, Y, TrainerConfig(patience_k=k), SimClock())
        epochs, best_epoch, best = _trace(evals, k)
        assert (rep.epochs_run, rep.best_epoch, rep.best_eval) == (epochs, best_epoch, best)
        # weights are the checkpoint of the first epoch reaching the maximum
        assert np.array_equal(m.w, np.full(3, float(best_epoch)))
        assert rep.best_eval == max([0.0] + rep.evaluations)


def test_all_zero_evals_keep_initial_weights():
    m = ScriptedModel([0.0])
    rep = train_until_stop(m, X, Y, TrainerConfig(patience_k=2), SimClock())
    assert rep.best_epoch == 0 and rep.epochs_run == 3
    assert np.array_equal(m.w, np.zeros(3)) and not rep.delta.any()


def test_empty_train_set():
    with pytest.raises(EmptyTrainSetError):
        train_until_stop(ScriptedModel([0.5]), np.zeros((0, 2)), np.zeros(0), TrainerConfig())


def test_divergence_rolls_back_and_raises():
    m = StudentModel.create(seed=0)
    rng = np.random.default_rng(0)
    Xs, ys = rng.standard_normal((64, 16)), rng.integers(0, 6, 64)
    cfg = TrainerConfig(patience_k=500, max_time=1e9, hyperparams=HyperParams(10.0, 0.9, 10.0))
    with np.errstate(all="ignore"), pytest.raises(ModelRejectedHyperparamsError):
        train_until_stop(m, Xs, ys, cfg, SimClock())
    assert np.all(np.isfinite(m.trainable))


def test_config_validation_and_roundtrip():
    cfg = TrainerConfig(3, 10.0, HyperParams(0.1, 0.5, 1e-3), 0.25, 7)
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(patience_k=0), dict(max_time=0.0), dict(eval_fraction=1.0)):
        with pytest.raises(InvariantError):
            TrainerConfig(**bad)


def test_holdout_split():
    tr, ev = holdout_split(100, 0.2, 0)
    assert len(ev) == 20 and len(tr) == 80
    assert sorted(np.concatenate([tr, ev]).tolist()) == list(range(100))
    assert np.array_equal(holdout_split(100, 0.2, 0)[1], ev)
    tr1, ev1 = holdout_split(1, 0.2, 0)
    assert tr1.tolist() == ev1.tolist() == [0]
    assert len(holdout_split(2, 0.01, 0)[1]) == 1


def _student_data(seed=0, n=200):
    rng = np.random.default_rng(seed)
    means = 2 * rng.standard_normal((6, 16))
    y = rng.integers(0, 6, n)
    return means[y] + rng.standard_normal((n, 16)), y


def test_real_student_frozen_untouched_and_delta_length():
    m = StudentModel.create(seed=1)
    frozen_before = m.frozen.copy()
    checksum = m.params.frozen_checksum()
    Xs, ys = _student_data(1)
    rep = train_until_stop(m, Xs, ys, TrainerConfig(patience_k=100, max_time=1e9), SimClock())
    assert rep.epochs_run > 100
    assert np.array_equal(m.frozen, frozen_before)
    assert m.params.frozen_checksum() == checksum
    assert rep.delta.size == 6 * (32 + 1) == freeze_partition(m.params).size


def test_fixed_epochs_ships_last_epoch():
    m = ScriptedModel([0.9, 0.1, 0.1])
    rep = train_fixed_epochs(m, X, Y, HyperParams(0.1, 0.0, 0.0), 3, SimClock())
    assert rep.epochs_run == 3 and rep.stop_reason is StopReason.FIXED_EPOCHS
    assert np.array_equal(m.w, np.full(3, 3.0))


def test_freeze_partition_view():
    m = StudentModel.create(seed=2)
    view = freeze_partition(m.params)
    assert not view.delta().any()
    view.values[0, 0] = 1.5
    assert view.delta()[0] == 1.5
    committed = view.commit()
    assert committed.version == m.params.version + 1
    assert committed.frozen_checksum() == m.params.frozen_checksum()
    assert m.trainable[0, 0] == 0.0
