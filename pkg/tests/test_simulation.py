import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from warrantysem.baseline import missing_prob
from warrantysem.data import Claim, Unreturned, validate_dataset
from warrantysem.distributions import (EXPONENTIAL, WEIBULL, BivariateLognormal,
                                       IndependentPair, JointModel)
from warrantysem.errors import ConfigError, StudyError
from warrantysem.sem import SemConfig, run_sem
from warrantysem.simulation import (SimScenario, breakdown_sweep, generate_batch,
                                    load_scenario, replication_data, run_study,
                                    scenario_from_mapping, scenario_lines, write_reports)

EXP_WEI = JointModel.build(IndependentPair(EXPONENTIAL, WEIBULL), [0.7, 5.0, 2.0])
FAST = SemConfig(burn_in=10, iterations=40)


def test_generate_batch_observation_rule():
    d = generate_batch(EXP_WEI, 500, 5.0, 6.0, 1)
    assert validate_dataset(d) == []
    assert d.n_units == 500
    for r in d.records:
        if isinstance(r, Claim):
            assert r.x + r.t < 6.0 and r.t < 5.0 and r.censor_c == 6.0
        else:
            assert r == Unreturned(6.0)


def test_generate_batch_extremes():
    d = generate_batch(EXP_WEI, 50, 5.0, 0.0, 2)
    assert d.n_claims == 0
    d = generate_batch(EXP_WEI, 50, math.inf, math.inf, 2)
    assert d.n_claims == 50


def test_generate_batch_deterministic():
    assert generate_batch(EXP_WEI, 100, 5.0, 6.0, 9) == generate_batch(EXP_WEI, 100, 5.0, 6.0, 9)


@pytest.mark.parametrize("truth", [EXP_WEI,
                                   JointModel.build(BivariateLognormal(), [1, 1, 1, 1, 0.3])])
def test_claim_fraction_matches_missing_prob(truth):
    n = 100_000
    d = generate_batch(truth, n, 5.0, 6.0, 3)
    p = missing_prob(truth, 6.0, 5.0)
    assert abs(d.n_claims / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_every_generated_batch_is_valid():
    for seed in range(30):
        d = generate_batch(EXP_WEI, 60, 3.0, 4.0, seed)
        assert validate_dataset(d) == [] or d.n_claims == 0


def _scenario(**kw):
    base = dict(truth=EXP_WEI, n_units=200, tau=5.0, T0=6.0, replications=4, sem=FAST,
                label="t", seed=5)
    base.update(kw)
    return SimScenario(**base)


def test_single_replication_report():
    s = _scenario(replications=1)
    rep = run_study(s)
    assert rep.estimates.shape == (1, 3)
    assert_allclose(rep.rmse, np.abs(rep.bias), rtol=1e-14)
    from warrantysem.simulation import _substream_seed
    d = generate_batch(EXP_WEI, 200, 5.0, 6.0, _substream_seed(5, 0, 0))
    est = run_sem(d, EXP_WEI.structure, replace(FAST, seed=_substream_seed(5, 0, 1)))
    assert_allclose(rep.bias, est.estimate.as_array() - EXP_WEI.theta, rtol=1e-14)
    assert rep.indices == (0,) and replication_data(s, 0) == d


def test_report_decomposition_and_determinism():
    s = _scenario(replications=6)
    a = run_study(s)
    b = run_study(s)
    assert np.array_equal(a.estimates, b.estimates)
    assert_allclose(a.rmse ** 2, a.bias ** 2 + a.variance, rtol=0, atol=1e-10)
    assert np.all(a.rmse ** 2 >= a.bias ** 2)
    assert 0.0 < a.mean_missing_rate < 1.0
    assert a.failures == 0


def test_workers_do_not_change_results():
    s = _scenario(replications=3)
    assert np.array_equal(run_study(s).estimates, run_study(s, workers=2).estimates)


def test_failures_counted_and_total_failure_raises():
    # nothing can be returned before T0 = 0, so every fit lacks claims
    s = _scenario(T0=0.0, replications=8)
    with pytest.raises(StudyError, match="all 8 replications failed"):
        run_study(s)
    # tiny batches with a short window: some replications see fewer than two claims
    s = _scenario(n_units=12, T0=2.0, replications=12, seed=1)
    rep = run_study(s)
    assert rep.failures > 0
    assert rep.failures + rep.estimates.shape[0] == 12
    assert len(rep.failure_messages) == rep.failures
    assert len(rep.indices) == rep.estimates.shape[0]
    for msg in rep.failure_messages:
        assert int(msg.split()[1].rstrip(":")) not in rep.indices


def test_breakdown_single_point_equals_study():
    s = _scenario(replications=3)
    (pt,) = breakdown_sweep(s, [5.0])
    direct = run_study(s)
    assert np.array_equal(pt.report.estimates, direct.estimates)
    assert_allclose(pt.relative_bias, direct.bias / EXP_WEI.theta, rtol=1e-14)
    assert pt.missing_rate == direct.mean_missing_rate


def test_breakdown_higher_scale_means_more_missing():
    s = _scenario(replications=2)
    pts = breakdown_sweep(s, [3.0, 12.0])
    assert pts[0].missing_rate < pts[1].missing_rate


def test_report_csv(tmp_path):
    rep = run_study(_scenario(replications=2))
    write_reports([rep], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "scenario,param,truth,bias,rmse,failures,replications"
    assert lines[1].startswith("t,x_rate,0.69999999999999996,")
    assert len(lines) == 4


def test_scenario_files(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("label = demo\nmodel_x = exponential\nmodel_t = weibull\ntruth = 0.7,5,2\n"
                 "N = 200\ntau = 5\nT0 = 6\nreplications = 3\nseed = 4\n")
    s, threads = load_scenario(p)
    assert threads == 1 and s.sem.burn_in == 100 and s.truth.theta.tolist() == [0.7, 5, 2]
    again, _ = scenario_from_mapping(dict(line.split(" = ") for line in scenario_lines(s)))
    assert again == s
    with pytest.raises(ConfigError, match="truth"):
        scenario_from_mapping({"N": 1, "tau": 1, "T0": 1, "replications": 1, "seed": 1,
                               "model_x": "exponential", "model_t": "weibull"})
    with pytest.raises(ConfigError, match="bad truth"):
        scenario_from_mapping({"N": 1, "tau": 1, "T0": 1, "replications": 1, "seed": 1,
                               "model_x": "exponential", "model_t": "weibull", "truth": "1,2"})


def test_shipped_scenarios_load():
    from importlib.resources import files
    names = sorted(p.name for p in files("warrantysem").joinpath("scenarios").iterdir()
                   if p.name.endswith(".cfg"))
    assert "table2_exp_exp_5_6.cfg" in names and "table1_s1.cfg" in names
    for name in names:
        s, _ = load_scenario(files("warrantysem").joinpath("scenarios", name))
        assert s.replications >= 1
