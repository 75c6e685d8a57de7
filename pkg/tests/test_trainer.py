import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import random_model, random_tensor

import oracles
from flft import (
    DivergenceError,
    InitScheme,
    Model,
    PidGains,
    PidState,
    ShapeError,
    SparseTensor,
    TrainConfig,
    compare,
    grid_search,
    init,
    pid_sgd_step,
    rmse,
    split,
    synth_lowrank,
    train,
)
from flft import trainer as trainer_mod
from flft.rng import SplitMix64
from flft.trainer import epochs_to_reach


def _curves(report):
    return [row[:3] for row in report.curve]


@pytest.fixture(scope="module")
def noisy():
    t = synth_lowrank((8, 6, 10), 2, 0.6, 0.05, seed=4)
    return split(t, (6, 2, 2), seed=4)


class TestRmse:
    def test_perfect(self, rng):
        m = random_model((2, 3, 2), 2, rng)
        idx = [[0, 0, 0], [1, 2, 1]]
        assert rmse(m, SparseTensor(m.shape, idx, m.predict_many(idx))) == 0.0

    def test_closed_form(self):
        m = Model(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((1, 1)), [0, 0], [0], [0])
        data = SparseTensor((2, 1, 1), [[0, 0, 0], [1, 0, 0]], [3.0, -4.0])
        assert rmse(m, data) == pytest.approx(math.sqrt(25 / 2), rel=1e-15)
        assert rmse(m, data) == pytest.approx(3.5355, abs=1e-4)

    def test_matches_brute_force(self, rng):
        m = random_model((5, 4, 3), 3, rng)
        data = random_tensor((5, 4, 3), 25, rng)
        assert rmse(m, data) == pytest.approx(oracles.rmse(oracles.to_lists(m), list(data)), rel=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            rmse(random_model((2, 2, 2), 1, rng), SparseTensor((3, 3, 3), [[2, 2, 2]], [0.0]))


class TestTrain:
    def test_fixed_point(self, rng):
        m = random_model((3, 3, 3), 2, rng)
        cells = np.array(list(np.ndindex(3, 3, 3)))
        full = SparseTensor(m.shape, cells, m.predict_many(cells))
        tr, va, _ = split(full, (1, 1, 1), seed=0)
        before = m.copy()
        report = train(m, tr, va, TrainConfig(eta=0.1, lam=0.0, rank=2, patience=5))
        assert m == before
        assert report.converged
        assert report.epochs_run == 6
        assert all(row[1] == row[2] == 0.0 for row in report.curve)

    def test_recovers_noiseless_low_rank(self):
        t = synth_lowrank((10, 8, 12), 3, 0.5, 0.0, seed=1)
        tr, va, te = split(t, (8, 1, 1), seed=0)
        m = init(t.shape, 3, InitScheme(high=1.0, seed=0))
        report = train(m, tr, va, TrainConfig(eta=0.1, lam=0.0, rank=3, seed=0))
        assert report.epochs_run <= 500
        assert report.final_val_rmse < 1e-2
        assert rmse(m, te) < 1e-2

    def test_deterministic(self, noisy):
        tr, va, _ = noisy
        cfg = TrainConfig(eta=0.05, lam=0.01, rank=2, seed=3, max_epochs=40,
                          optimizer_kind="pid_nonlinear", gains=PidGains(1, 0.02, 0.1, 0.5, 0.7))
        runs = []
        for _ in range(2):
            m = init(tr.shape, 2, InitScheme(seed=1))
            runs.append((train(m, tr, va, cfg), m))
        assert _curves(runs[0][0]) == _curves(runs[1][0])
        assert runs[0][1] == runs[1][1]

    @pytest.mark.parametrize("shuffle", [True, False])
    def test_sgd_equals_proportional_pid(self, noisy, shuffle):
        tr, va, _ = noisy
        base = TrainConfig(eta=0.05, lam=0.01, rank=2, seed=5, max_epochs=30, shuffle=shuffle)
        m1, m2 = (init(tr.shape, 2, InitScheme(seed=2)) for _ in range(2))
        r1 = train(m1, tr, va, base)
        r2 = train(m2, tr, va, replace(base, optimizer_kind="pid_nonlinear",
                                       gains=PidGains(1, 0, 0, 0.4, 0.6)))
        assert _curves(r1) == _curves(r2)
        assert m1 == m2

    def test_linear_kind_ignores_alphas(self, noisy):
        tr, va, _ = noisy
        gains = PidGains(1, 0.05, 0.1, 0.5, 0.5)
        base = TrainConfig(eta=0.05, rank=2, seed=1, max_epochs=20, gains=gains)
        runs = []
        for cfg in (replace(base, optimizer_kind="pid_linear"),
                    replace(base, optimizer_kind="pid_nonlinear", gains=gains.linear)):
            runs.append(train(init(tr.shape, 2, InitScheme(seed=0)), tr, va, cfg))
        assert _curves(runs[0]) == _curves(runs[1])

    def test_pid_state_follows_entries_through_shuffles(self, noisy):
        tr, va, _ = noisy
        gains = PidGains(0.9, 0.05, 0.2, 0.5, 0.8)
        cfg = TrainConfig(eta=0.05, lam=0.01, rank=2, seed=11, max_epochs=3,
                          optimizer_kind="pid_nonlinear", gains=gains, integral_clamp=None)
        m = init(tr.shape, 2, InitScheme(seed=0))
        replay = m.copy()
        train(m, tr, va, cfg)
        stream, state = SplitMix64(11), PidState(len(tr), clamp=None)
        for _ in range(3):
            for slot in stream.permutation(len(tr)):
                pid_sgd_step(replay, state, int(slot), tr[slot], 0.05, 0.01, gains)
        assert m == replay
        assert np.all(state.visits == 3)

    def test_runs_to_max_epochs(self, noisy):
        tr, va, _ = noisy
        report = train(init(tr.shape, 2), tr, va, TrainConfig(rank=2, max_epochs=7, tol=1e-300))
        assert report.epochs_run == 7 and not report.converged
        assert len(report.curve) == 7
        seconds = [row[3] for row in report.curve]
        assert seconds == sorted(seconds)

    def test_patience_needs_consecutive_epochs(self, noisy, monkeypatch):
        tr, va, _ = noisy
        scripted = iter([1.0, 0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0.4, 0.3])
        def fake_rmse(model, data):
            return next(scripted) if data is va else 0.0

        monkeypatch.setattr(trainer_mod, "rmse", fake_rmse)
        report = train(init(tr.shape, 2), tr, va, TrainConfig(rank=2, tol=1e-3, patience=3))
        # small moves at epochs 3,4 then a reset at 5, then 6,7,8 complete the streak
        assert report.epochs_run == 8 and report.converged

    def test_divergence(self, noisy):
        tr, va, _ = noisy
        with pytest.raises(DivergenceError, match="diverged in epoch"):
            train(init(tr.shape, 2, InitScheme(high=1.0)), tr, va, TrainConfig(eta=50.0, rank=2))

    def test_rank_and_shape_checks(self, noisy):
        tr, va, _ = noisy
        with pytest.raises(ShapeError):
            train(init(tr.shape, 3), tr, va, TrainConfig(rank=2))
        with pytest.raises(ShapeError):
            train(init((2, 2, 2), 2), tr, va, TrainConfig(rank=2))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer_kind="adam")
        with pytest.raises(ValueError):
            TrainConfig(tol=0)
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=0)

    def test_report_table(self, noisy):
        tr, va, _ = noisy
        report = train(init(tr.shape, 2), tr, va, TrainConfig(rank=2, max_epochs=3))
        lines = report.to_table().splitlines()
        assert lines[0] == "epoch,train_rmse,val_rmse,seconds"
        assert len(lines) == 4 and lines[1].startswith("1,")
        assert report.to_table(timing=False).splitlines()[1].endswith(",0.000000")

    def test_epochs_to_reach(self, noisy):
        tr, va, _ = noisy
        report = train(init(tr.shape, 2, InitScheme(high=0.5)), tr, va, TrainConfig(eta=0.05, rank=2, max_epochs=50))
        floor = report.val_curve.min()
        hit = epochs_to_reach(report, 1.1 * floor)
        assert report.curve[hit - 1][2] <= 1.1 * floor
        assert all(row[2] > 1.1 * floor for row in report.curve[:hit - 1])
        assert epochs_to_reach(report, -1.0) is None


class TestCompare:
    def test_single_variant_is_train_plus_rmse(self, noisy):
        cfg = TrainConfig(eta=0.05, rank=2, max_epochs=25, seed=2)
        (res,) = compare([cfg], noisy, InitScheme(seed=6))
        m = init(noisy[0].shape, 2, InitScheme(seed=6))
        report = train(m, noisy[0], noisy[1], cfg)
        assert _curves(res.report) == _curves(report)
        assert res.test_rmse == rmse(m, noisy[2])
        assert res.model == m

    def test_identical_variants(self, noisy):
        cfg = TrainConfig(eta=0.05, rank=2, max_epochs=25, optimizer_kind="pid_linear",
                          gains=PidGains(1, 0.01, 0.1))
        a, b = compare([cfg, cfg], noisy)
        assert _curves(a.report) == _curves(b.report) and a.test_rmse == b.test_rmse

    def test_shared_initial_model(self, noisy, monkeypatch):
        starts = []
        real_train = trainer_mod.train

        def spy(model, *args):
            starts.append(model.copy())
            return real_train(model, *args)

        monkeypatch.setattr(trainer_mod, "train", spy)
        cfgs = [TrainConfig(rank=2, max_epochs=3, optimizer_kind=k) for k in ("sgd", "pid_nonlinear")]
        compare(cfgs, noisy, InitScheme(seed=13))
        assert starts[0] == starts[1]

    def test_workers_do_not_change_results(self, noisy):
        cfgs = [TrainConfig(rank=2, eta=0.05, max_epochs=20, optimizer_kind=k,
                            gains=PidGains(1, 0.01, 0.05, 0.5, 0.9)) for k in ("sgd", "pid_linear", "pid_nonlinear")]
        serial = compare(cfgs, noisy)
        threaded = compare(cfgs, noisy, workers=3)
        for s, t in zip(serial, threaded):
            assert s.config == t.config and _curves(s.report) == _curves(t.report)

    def test_tuned_pid_reaches_threshold_no_later_than_sgd(self):
        shape = (20, 15, 30)

        def data(seed):
            return split(synth_lowrank(shape, 3, 0.5, 0.0, seed=seed), (2, 2, 6), seed=seed)

        start = InitScheme(high=0.5, seed=1000)
        sgd = grid_search(TrainConfig(rank=3, max_epochs=200), data(1000), start, etas=[0.01, 0.02, 0.05])
        pid = grid_search(replace(sgd, optimizer_kind="pid_nonlinear"), data(1000), start,
                          gains=[PidGains(1, ki, kd, a, a) for ki in (0.005, 0.01, 0.02)
                                 for kd in (0.05, 0.1) for a in (0.5, 0.8)])
        wins = 0
        for seed in range(10):
            runs = compare([replace(sgd, seed=seed), replace(pid, seed=seed)], data(seed),
                           InitScheme(high=0.5, seed=seed))
            e_sgd, e_pid = (epochs_to_reach(r.report, 0.05) for r in runs)
            wins += e_pid is not None and (e_sgd is None or e_pid <= e_sgd)
        assert wins > 5

    def test_rank_mismatch(self, noisy):
        with pytest.raises(ValueError, match="rank"):
            compare([TrainConfig(rank=2), TrainConfig(rank=3)], noisy)
        with pytest.raises(ValueError):
            compare([], noisy)


class TestGridSearch:
    def test_single_point(self, noisy):
        base = TrainConfig(rank=2, max_epochs=5)
        assert grid_search(base, noisy) == base

    def test_skips_divergent_eta(self, noisy):
        base = TrainConfig(rank=2, max_epochs=20)
        best = grid_search(base, noisy, InitScheme(high=1.0), etas=[50.0, 0.05])
        assert best.eta == 0.05

    def test_matches_independent_runs(self, noisy):
        base = TrainConfig(rank=2, max_epochs=40, optimizer_kind="pid_nonlinear", seed=1)
        etas, gains = [0.02, 0.08], [PidGains(1, 0.01, 0.05, 0.5, 0.5), PidGains(1, 0.05, 0.2, 0.8, 0.8)]
        best = grid_search(base, noisy, InitScheme(seed=3), etas=etas, gains=gains)
        scores = []
        for eta in etas:
            for g in gains:
                cfg = replace(base, eta=eta, gains=g)
                report = train(init(noisy[0].shape, 2, InitScheme(seed=3)), noisy[0], noisy[1], cfg)
                scores.append((report.final_val_rmse, report.epochs_run, cfg))
        assert best == min(scores, key=lambda s: (s[0], s[1]))[2]

    def test_tie_breaks(self, noisy, monkeypatch):
        from flft.trainer import TrainReport

        def fake_train(model, tr, va, cfg):
            epochs = {0.1: 9, 0.2: 4, 0.3: 4}[cfg.eta]
            return TrainReport(epochs, True, [(epochs, 0.0, 0.5, 0.0)])

        monkeypatch.setattr(trainer_mod, "train", fake_train)
        best = grid_search(TrainConfig(rank=2), noisy, etas=[0.1, 0.2, 0.3])
        assert best.eta == 0.2
