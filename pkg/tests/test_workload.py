from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from loraserve.exceptions import ConfigError, FormatError
from loraserve.workload import (
    WorkloadConfig, generate_trace, power_law_pmf, read_trace, sample_adapters, sample_intervals,
    topic_tokens, write_trace,
)


def test_pmf_hand_values():
    np.testing.assert_allclose(power_law_pmf(3, 1.0), [6 / 11, 3 / 11, 2 / 11], rtol=1e-12)
    np.testing.assert_allclose(power_law_pmf(4, 0.0), [0.25] * 4)
    np.testing.assert_array_equal(power_law_pmf(1, 2.0), [1.0])


def test_pmf_harmonic_oracle():
    h50 = sum(Fraction(1, j) for j in range(1, 51))
    assert power_law_pmf(50, 1.0)[0] == pytest.approx(float(1 / h50), rel=1e-12)


@given(st.integers(1, 200), st.floats(0, 4))
def test_pmf_properties(n, alpha):
    p = power_law_pmf(n, alpha)
    assert p.sum() == pytest.approx(1.0)
    assert np.all(np.diff(p) <= 1e-15)


def test_pmf_invalid():
    with pytest.raises(ConfigError):
        power_law_pmf(0, 1.0)


def test_sampler_chi_square():
    n, count = 10, 20_000
    counts = np.bincount(sample_adapters(n, 1.2, count, seed=4), minlength=n)
    assert chisquare(counts, count * power_law_pmf(n, 1.2)).pvalue > 0.001


def test_interval_moments():
    x = sample_intervals(2.0, 0.5, 50_000, seed=3)
    assert x.mean() == pytest.approx(0.5, rel=0.02)
    assert x.std() / x.mean() == pytest.approx(0.5, rel=0.05)


def test_short_duration_is_empty():
    assert generate_trace(WorkloadConfig(rate=0.001, duration=0.0)) == []


def test_trace_bounds_and_order():
    cfg = WorkloadConfig(n=7, rate=5, duration=20, input_bounds=(3, 5), output_bounds=(2, 2), seed=2)
    events = generate_trace(cfg)
    assert len(events) > 50
    times = [e.arrival_ms for e in events]
    assert times == sorted(times) and times[-1] < 20_000
    for e in events:
        assert 3 <= len(e.prompt) <= 5
        assert e.target_output_len == 2
        assert 0 <= e.intended_adapter < 7
        assert e.prompt[0] == topic_tokens(e.intended_adapter, cfg.vocab_size)[0]
        assert set(e.prompt) <= set(topic_tokens(e.intended_adapter, cfg.vocab_size))
        assert e.explicit_adapter is None


def test_arrivals_shared_across_n_and_alpha():
    a = generate_trace(WorkloadConfig(n=5, alpha=0.5, rate=2, duration=30, seed=1))
    b = generate_trace(WorkloadConfig(n=50, alpha=1.5, rate=2, duration=30, seed=1))
    assert [e.arrival_ms for e in a] == [e.arrival_ms for e in b]


def test_explicit_fraction_one():
    events = generate_trace(WorkloadConfig(rate=2, duration=10, explicit_fraction=1.0))
    assert events and all(e.explicit_adapter == e.intended_adapter for e in events)


def test_trace_file_deterministic(tmp_path):
    cfg = WorkloadConfig(n=5, rate=3, duration=10, seed=8)
    write_trace(tmp_path / "a.jsonl", generate_trace(cfg))
    write_trace(tmp_path / "b.jsonl", generate_trace(cfg))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_trace(tmp_path / "a.jsonl") == generate_trace(cfg)


def test_read_trace_reports_bad_line(tmp_path):
    good = generate_trace(WorkloadConfig(rate=3, duration=5))[0].to_json()
    path = tmp_path / "t.jsonl"
    path.write_text(good + "\n{not json\n")
    with pytest.raises(FormatError, match=r"t.jsonl:2"):
        read_trace(path)


def test_read_empty_trace(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_trace(tmp_path / "e.jsonl") == []


@pytest.mark.parametrize("kwargs", [
    {"n": 0}, {"rate": 0}, {"cv": -1}, {"alpha": -0.1}, {"input_bounds": (5, 2)},
    {"output_bounds": (0, 3)}, {"explicit_fraction": 1.5},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        WorkloadConfig(**kwargs)
