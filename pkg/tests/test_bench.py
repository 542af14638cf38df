import hashlib
import io
import math

import numpy as np
import pytest

import tdbo.bench as bench
from tdbo.bench import (
    RunRecord,
    make_config,
    read_records,
    replicate,
    replication_seed,
    run_bo,
    simple_regret,
    summarize,
    summary_csv,
    write_records,
)
from tdbo.gp import Dataset, build_model
from tdbo.lookahead import final_decision
from tdbo.optimizer import OptimizationError


def small(case="quad-d", method="ei", **kw):
    kw.setdefault("reps", 1)
    kw.setdefault("steps", 3)
    kw.setdefault("n_initial", 12)
    kw.setdefault("mc_samples", 32)
    return make_config(case, method, **kw)


def test_simple_regret():
    assert simple_regret(1.0, -1.0, -1.0) == 0.0
    assert simple_regret(1.0, -1.0, 1.0) == -12.0
    assert simple_regret(1.0, -1.0, 0.0) == pytest.approx(math.log10(0.5), abs=1e-12)
    assert simple_regret(1.0, -1.0, 1.0 + 1e-9) == -12.0
    with pytest.raises(ValueError):
        simple_regret(1.0, 1.0, 0.0)


def test_config_defaults_and_schedule():
    c = make_config("quad-d", "r2ley")
    assert c.n_initial == 40 and c.m_steps == 10 and c.acquisition.mc_samples_M == 500
    assert make_config("levy8", "ei").n_initial == 90
    assert make_config("hartmann6", "ei").n_initial == 140
    times = np.concatenate([c.initial_times, c.step_times])
    assert np.all(np.diff(times) > 0)
    assert c.step_times[-1] == 4.0 and c.initial_times[-1] == 2.0
    np.testing.assert_allclose(np.diff(c.step_times), 0.2)
    with pytest.raises(ValueError):
        make_config("quad-d", "ei", n_initial=1)
    with pytest.raises(ValueError):
        make_config("quad-d", "ei", horizon=5.0)
    with pytest.raises(ValueError):
        make_config("quad-d", "kg")


@pytest.mark.parametrize("method", ["random", "ei", "pi", "ucb", "rei", "r2ley"])
def test_run_shape_and_determinism(method):
    c = small(method=method)
    a, b = run_bo(c, 123), run_bo(c, 123)
    assert a == b and a.to_json() == b.to_json()
    assert len(a.step_x) == len(a.step_y) == len(a.step_t) == c.m_steps
    assert a.step_t[-1] == c.horizon_T
    assert a.x_final == a.step_x[-1]
    assert math.isfinite(a.regret) and a.regret <= 0
    assert c.oracle.domain.contains(a.x_final)


def test_single_step_r2ley_is_final_decision():
    c = small(method="r2ley", steps=1)
    rec = run_bo(c, 9)
    policy = np.random.default_rng([9, 2])
    data = Dataset(np.array(rec.initial_x), rec.initial_t, rec.initial_y)
    model = build_model(data, bench._fit(data, c, policy).hyperparams)
    np.testing.assert_array_equal(rec.x_final, final_decision(model, 4.0, c.oracle.domain, c.acquisition))


def test_regret_uses_noise_free_truth():
    rec = run_bo(small(method="ei"), 4)
    spec = small().oracle
    from tdbo.testbed import eval_oracle, extrema_at_horizon

    assert rec.f_final == eval_oracle(spec, rec.x_final, 4.0)
    assert (rec.f_max, rec.f_min) == extrema_at_horizon(spec, 4.0)
    assert rec.regret == simple_regret(rec.f_max, rec.f_min, rec.f_final)


def test_methods_share_initial_design():
    a = replicate(small(method="ei", reps=2))
    b = replicate(small(method="random", reps=2))
    for ra, rb in zip(a, b):
        assert ra.initial_x == rb.initial_x and ra.initial_y == rb.initial_y


def test_replicate_identity_and_determinism():
    c = small(method="ucb", reps=1, seed=5)
    assert replicate(c)[0] == run_bo(c, replication_seed(c, 0))
    c3 = small(method="ucb", reps=3, seed=5)
    assert replicate(c3) == replicate(c3)
    assert [r.replication for r in replicate(c3)] == [0, 1, 2]


def test_independent_starts():
    recs = replicate(small(method="random", reps=20, steps=1))
    digests = {hashlib.sha256(repr((r.initial_x, r.initial_y)).encode()).hexdigest() for r in recs}
    assert len(digests) == 20


def test_parallel_matches_serial():
    c = small(method="ei", reps=3, seed=2)
    assert replicate(c, workers=2) == replicate(c, workers=1)


def test_failed_replication_is_recorded(monkeypatch):
    real = bench.run_bo

    def flaky(config, rng=None, replication=0):
        if replication == 1:
            raise RuntimeError("boom")
        return real(config, rng, replication)

    monkeypatch.setattr(bench, "run_bo", flaky)
    recs = replicate(small(method="random", reps=3))
    assert [r.ok for r in recs] == [True, False, True]
    assert "boom" in recs[1].error
    assert summarize(recs)[0].reps == 2
    monkeypatch.setattr(bench, "run_bo", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("all")))
    with pytest.raises(RuntimeError, match="all"):
        replicate(small(method="random", reps=2))


def test_proposal_failure_falls_back_to_random(monkeypatch):
    def broken(*args, **kwargs):
        raise OptimizationError("no luck")

    monkeypatch.setattr(bench, "propose_myopic", broken)
    rec = run_bo(small(method="ei"), 1)
    assert len(rec.warnings) == 3 and all("random fallback" in w for w in rec.warnings)
    assert math.isfinite(rec.regret)


def _rec(regret, method="ei"):
    return RunRecord("quad-d", method, 1, 0, 0, [], [], [], [], [], [], [0.5], 0.0, 1.0, -1.0, regret)


def test_summarize_examples():
    (row,) = summarize([_rec(-0.7) for _ in range(4)])
    assert (row.mean, row.stderr, row.median, row.reps) == (-0.7, 0.0, -0.7, 4)
    (row,) = summarize([_rec(0.0), _rec(-1.0)])
    assert row.mean == -0.5 and row.stderr == pytest.approx(0.5, abs=1e-15)
    (row,) = summarize([_rec(v) for v in (-3.0, -2.0, -1.0, 0.0)])
    assert row.median == -1.5 and row.q25 == -2.25 and row.q75 == -0.75
    rows = summarize([_rec(-1.0, "ei"), _rec(-2.0, "ucb"), _rec(-3.0, "ei")])
    assert [(r.method, r.reps) for r in rows] == [("ei", 2), ("ucb", 1)]


def test_record_round_trip_is_lossless():
    recs = replicate(small(method="pi", reps=2, seed=3))
    buf = io.StringIO()
    write_records(recs, buf)
    back = read_records(io.StringIO(buf.getvalue()))
    assert back == recs
    assert summary_csv(summarize(back)) == summary_csv(summarize(recs))
    assert "wall_clock" not in buf.getvalue()
    csv_text = summary_csv(summarize(recs))
    assert csv_text.splitlines()[0] == "case,d,method,mean,stderr,median,q25,q75,reps"
    assert float(csv_text.splitlines()[1].split(",")[3]) == summarize(recs)[0].mean


@pytest.mark.slow
def test_random_policy_regret_band():
    recs = replicate(make_config("quad-d", "random", reps=20, seed=0))
    mean = summarize(recs)[0].mean
    assert -1.9 <= mean <= -0.9


@pytest.mark.parametrize("case", ["griewank", "hartmann3", "hartmann6", "levy8", "styblinski-tang10"])
@pytest.mark.parametrize("method", ["ei", "r2ley"])
def test_higher_dimensional_reduced_budget(case, method):
    c = make_config(case, method, reps=1, steps=2, n_initial=15, mc_samples=16, seed=1)
    a = run_bo(c, 7)
    assert a == run_bo(c, 7)
    assert c.oracle.domain.contains(a.x_final)
    assert all(c.oracle.domain.contains(x) for x in a.step_x)
    assert math.isfinite(a.regret) and -12 <= a.regret <= 0
