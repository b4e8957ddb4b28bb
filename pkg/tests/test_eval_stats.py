import csv
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from advtrain.evaluation import (EvalReport, accuracy, config_hash, eot_sensitivity, evaluate_robustness,
                                 format_table, perturbation_sweep, write_curve_csv, write_report_csv)
from advtrain.models import PNIL, Dense, Flatten, Model, ReLU, build_small_cnn
from advtrain.stats import betainc, corrected_resampled_ttest, t_cdf, t_two_sided_p


def constant_model():
    m = Model([("flat", Flatten()), ("fc", Dense(16, 10))], (1, 4, 4), 10)
    m.params["fc.weight"].data[:] = 0
    m.params["fc.bias"].data[:] = np.eye(10, dtype=np.float32)[0]
    return m


def pnil_net(seed=0):
    rng = np.random.default_rng(seed)
    m = Model([("pnil", PNIL((1, 4, 4), b_init=-2.0)), ("flat", Flatten()), ("fc1", Dense(16, 12)),
               ("relu", ReLU()), ("fc2", Dense(12, 3))], (1, 4, 4), 3)
    for name, p in m.params.items():
        if name.endswith("weight"):
            p.data = rng.normal(0, 1.0, p.shape).astype(np.float32)
    return m


def toy(n=60, seed=0, k=3):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % k
    x = rng.uniform(0, 0.4, (n, 1, 4, 4)).astype(np.float32)
    for c in range(k):
        x[y == c, 0, c % 4, :] += 0.5
    return x, y


# ---------------------------------------------------------------------------
# evaluation


def test_constant_classifier_scores_exactly_ten_percent():
    x = np.random.default_rng(0).uniform(size=(100, 1, 4, 4)).astype(np.float32)
    y = np.arange(100) % 10
    rep = evaluate_robustness(constant_model(), (x, y), attacks=("clean", "pgd", "spsa", "fgsm", "rfgsm",
                                                                  "r_plus_fgsm"),
                              pgd_steps=5, spsa_samples=16, spsa_steps=3, spsa_subset=None)
    assert rep.accuracies == {k: 10.0 for k in ("clean", "pgd", "spsa", "fgsm", "rfgsm", "r_plus_fgsm")}
    assert rep.effective_robustness == 10.0 and rep.eot_L == 1


def test_untrained_model_is_at_chance():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(1000, 1, 28, 28)).astype(np.float32)
    y = rng.integers(0, 10, 1000)
    acc = accuracy(build_small_cnn(pnil=True, seed=3), x, y, seed=0)
    # three binomial standard deviations at p = 0.1, n = 1000
    assert abs(acc - 10.0) <= 300 * math.sqrt(0.1 * 0.9 / 1000)


def test_report_min_and_columns():
    x, y = toy()
    rep = evaluate_robustness(pnil_net(), (x, y), attacks=("clean", "pgd", "spsa"), eot_L=2, eps=0.1,
                              pgd_steps=3, spsa_samples=8, spsa_steps=2, spsa_subset=20)
    assert rep.columns() == ["clean", "spsa", "pgd"]
    assert rep.effective_robustness == min(rep.accuracies.values())
    assert rep.counts == {"clean": 60, "pgd": 60, "spsa": 20}
    assert len(rep.spsa_indices) == 20 and rep.spsa_indices == sorted(set(rep.spsa_indices))
    assert all(0 <= a <= 100 for a in rep.accuracies.values())
    again = evaluate_robustness(pnil_net(), (x, y), attacks=("clean", "pgd", "spsa"), eot_L=2, eps=0.1,
                                pgd_steps=3, spsa_samples=8, spsa_steps=2, spsa_subset=20, workers=3,
                                batch_size=7)
    assert again.accuracies == rep.accuracies and again.spsa_indices == rep.spsa_indices
    assert again.config_hash == rep.config_hash


def test_default_eot_depends_on_noise_layer():
    x, y = toy(6)
    assert evaluate_robustness(pnil_net(), (x, y), ("clean",)).eot_L == 100
    assert evaluate_robustness(constant_model(), (np.zeros((2, 1, 4, 4), np.float32), [0, 1]), ("clean",)).eot_L == 1
    with pytest.raises(ValueError):
        evaluate_robustness(pnil_net(), (x, y), ())


def test_zero_budget_columns_equal_clean():
    x, y = toy()
    m = pnil_net(1)
    rep = evaluate_robustness(m, (x, y), ("clean", "pgd", "fgsm"), eot_L=3, eps=0.0)
    assert rep.accuracies["pgd"] == rep.accuracies["clean"] == rep.accuracies["fgsm"]
    curve = perturbation_sweep(m, (x, y), 0.1, multipliers=(0.0, 1.0), steps=3, eot_L=2)
    assert curve[0] == (0.0, 0.0, rep.accuracies["clean"])
    assert curve[1][2] <= curve[0][2]


def test_obfuscation_flag():
    def rep(spsa, pgd):
        return EvalReport({"clean": 90.0, "spsa": spsa, "pgd": pgd}, {}, 1, "")

    assert rep(2.0, 60.0).obfuscated
    assert not rep(50.0, 60.0).obfuscated
    assert not rep(65.0, 57.0).obfuscated
    assert rep(65.0, 57.0).effective_robustness == 57.0
    assert not EvalReport({"clean": 90.0}, {}, 1, "").obfuscated


def test_eot_sensitivity_deterministic_model_is_flat():
    m = constant_model()
    with pytest.warns(UserWarning):
        curve = eot_sensitivity(m, (np.zeros((10, 1, 4, 4), np.float32), np.arange(10)), 0.1, (1, 5), steps=2)
    assert curve[0][1] == curve[1][1]


def test_config_hash_is_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_report_writers(tmp_path):
    reps = {"pnil": EvalReport({"clean": 98.0, "spsa": 65.0, "pgd": 57.0}, {}, 100, "abc"),
            "base": EvalReport({"clean": 99.0, "spsa": 2.0, "pgd": 60.0}, {}, 1, "def")}
    write_report_csv(tmp_path / "r.csv", reps)
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["config"] for r in rows] == ["pnil", "base"]
    assert float(rows[0]["min"]) == 57.0 and rows[1]["obfuscated"] == "1"
    table = format_table({"pnil": {"clean": [98, 99], "spsa": [60, 70], "pgd": [55, 59], "min": [55, 59]}},
                         stars={"pnil": {"pgd"}})
    lines = table.splitlines()
    assert lines[0].split() == ["Configuration", "Clean", "SPSA", "PGD", "Min"]
    assert "57.0±2.8*" in lines[2] and "65.0±7.1" in lines[2]
    write_curve_csv(tmp_path / "c.csv", ["L", "acc"], [(1, 50.0), (10, 45.5)])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["L,acc", "1,50.0", "10,45.5"]


# ---------------------------------------------------------------------------
# statistics

# diffs 1..10 with ratio 1: mean 5.5, sample variance 55/6, so t = sqrt(3);
# p from a 50-digit quadrature of the t(9) density over [t, inf)
T_ONE_TO_TEN = 1.732050807568877293527446
P_ONE_TO_TEN = 0.1173068030142381601893092


def test_ttest_reference_values():
    r = corrected_resampled_ttest(np.arange(1, 11))
    assert (r.n, r.ratio, r.alpha) == (10, 1.0, 0.003)
    assert abs(r.t - T_ONE_TO_TEN) < 1e-12
    assert abs(r.p - P_ONE_TO_TEN) < 1e-12
    assert not r.significant


def _oracle(diffs, ratio):
    mpmath.mp.dps = 40
    d = [mpmath.mpf(float(v)) for v in diffs]
    n = len(d)
    mean = sum(d) / n
    var = sum((v - mean) ** 2 for v in d) / (n - 1)
    t = mean / mpmath.sqrt((mpmath.mpf(1) / n + mpmath.mpf(ratio)) * var)
    nu = mpmath.mpf(n - 1)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    p = 2 * mpmath.quad(lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2), [abs(t), mpmath.inf])
    return float(t), float(p)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=12), st.sampled_from([0.25, 1.0, 2.0]))
@settings(max_examples=30, deadline=None)
def test_ttest_matches_quadrature_oracle(diffs, ratio):
    assume(np.var(diffs) > 1e-6)
    r = corrected_resampled_ttest(diffs, ratio)
    t, p = _oracle(diffs, ratio)
    assert abs(r.t - t) <= 1e-10 * max(1, abs(t))
    assert abs(r.p - p) <= 1e-10


def test_all_zero_diffs():
    r = corrected_resampled_ttest(np.zeros(10))
    assert (r.t, r.p, r.significant, r.degenerate) == (0.0, 1.0, False, True)


def test_constant_nonzero_diffs_are_degenerate():
    r = corrected_resampled_ttest([2.0] * 10)
    assert r.p == 0.0 and r.degenerate and r.significant and r.t == math.inf


def test_ttest_input_errors():
    with pytest.raises(ValueError):
        corrected_resampled_ttest([1.0])
    with pytest.raises(ValueError):
        corrected_resampled_ttest([1.0, 2.0], ratio=0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(0.01, 100))
@settings(max_examples=50, deadline=None)
def test_ttest_symmetry_and_scale(diffs, c):
    assume(np.var(diffs) > 1e-6)
    r = corrected_resampled_ttest(diffs)
    neg = corrected_resampled_ttest([-v for v in diffs])
    scaled = corrected_resampled_ttest([c * v for v in diffs])
    assert neg.t == pytest.approx(-r.t, rel=1e-12, abs=1e-12)
    assert neg.p == pytest.approx(r.p, rel=1e-12, abs=1e-15)
    assert scaled.t == pytest.approx(r.t, rel=1e-9, abs=1e-12)
    assert 0 <= r.p <= 1


@given(st.floats(0.1, 40), st.floats(0.1, 40), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_betainc_matches_mpmath(a, b, x):
    mpmath.mp.dps = 30
    ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert abs(betainc(a, b, x) - ref) <= 1e-12


def test_t_distribution_helpers():
    assert t_two_sided_p(0.0, 5) == 1.0
    assert t_two_sided_p(math.inf, 5) == 0.0
    assert t_cdf(0.0, 3) == 0.5
    # t(1) is Cauchy: P(T <= 1) = 3/4
    assert t_cdf(1.0, 1) == pytest.approx(0.75, abs=1e-14)
    assert t_cdf(-1.0, 1) == pytest.approx(0.25, abs=1e-14)
    with pytest.raises(ValueError):
        betainc(0, 1, 0.5)
