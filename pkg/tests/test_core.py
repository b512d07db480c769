import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedasync.core import (
    ClientUpdate,
    ConfigError,
    DimensionMismatchError,
    GlobalState,
    Hyperparams,
    NonFiniteError,
    ParamVector,
    ProtocolViolationError,
    derive_rng,
    mix,
    staleness_weight,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
vectors = st.lists(finite_floats, min_size=1, max_size=8)


class TestParamVector:
    def test_dim_and_values(self):
        w = ParamVector([1.0, 2.0, 3.0])
        assert w.dim == 3
        assert np.array_equal(w.values, [1.0, 2.0, 3.0])

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            ParamVector([1.0, math.nan])
        with pytest.raises(NonFiniteError):
            ParamVector([math.inf])

    def test_values_are_read_only(self):
        w = ParamVector([1.0, 2.0])
        with pytest.raises(ValueError):
            w.values[0] = 5.0

    def test_equality_is_by_value(self):
        assert ParamVector([1.0, 2.0]) == ParamVector([1.0, 2.0])
        assert ParamVector([1.0, 2.0]) != ParamVector([1.0, 2.5])

    def test_zeros(self):
        assert ParamVector.zeros(4).dim == 4
        assert not ParamVector.zeros(4).values.any()


class TestStalenessWeight:
    def test_fresh_update_returns_base_weight(self):
        # s(0) = 1 regardless of the exponent
        for a in (0.0, 0.5, 2.0):
            assert staleness_weight(0.7, a, 5, 5) == 0.7

    def test_zero_exponent_ignores_staleness(self):
        assert staleness_weight(0.7, 0.0, 9, 0) == 0.7

    def test_polynomial_decay(self):
        # 0.8 * (1 + 3) ** -0.5 = 0.8 / 2
        assert staleness_weight(0.8, 0.5, 3, 0) == 0.4

    def test_rejects_update_from_future(self):
        with pytest.raises(ProtocolViolationError):
            staleness_weight(0.7, 0.5, 3, 4)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            staleness_weight(0.0, 0.5, 1, 0)
        with pytest.raises(ValueError):
            staleness_weight(1.5, 0.5, 1, 0)
        with pytest.raises(ValueError):
            staleness_weight(0.7, -0.1, 1, 0)
        with pytest.raises(ValueError):
            staleness_weight(0.7, 0.5, 1, -1)
        with pytest.raises(NonFiniteError):
            staleness_weight(math.nan, 0.5, 1, 0)

    @given(
        beta=st.floats(min_value=0.01, max_value=1.0),
        a=st.floats(min_value=0.01, max_value=3.0),
        stale=st.integers(min_value=0, max_value=1000),
    )
    def test_strictly_decreasing_in_staleness_for_positive_exponent(self, beta, a, stale):
        here = staleness_weight(beta, a, stale, 0)
        next_ = staleness_weight(beta, a, stale + 1, 0)
        assert next_ < here
        assert 0.0 < here <= beta

    @given(beta=st.floats(min_value=0.01, max_value=1.0), stale=st.integers(0, 1000))
    def test_constant_for_zero_exponent(self, beta, stale):
        assert staleness_weight(beta, 0.0, stale, 0) == beta

    def test_extreme_staleness_passes_tiny_weight_through(self):
        w = staleness_weight(0.7, 3.0, 10**6, 0)
        assert 0.0 < w < 1e-15


class TestMix:
    def test_full_replacement(self):
        prev, new = ParamVector([5.0, -3.0]), ParamVector([1.0, 2.0])
        assert np.array_equal(mix(prev, new, 1.0).values, new.values)

    def test_identity(self):
        prev, new = ParamVector([5.0, -3.0]), ParamVector([1.0, 2.0])
        assert np.array_equal(mix(prev, new, 0.0).values, prev.values)

    def test_interpolation(self):
        out = mix(ParamVector([0.0, 0.0]), ParamVector([1.0, 1.0]), 0.7)
        assert np.array_equal(out.values, [0.7, 0.7])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mix(ParamVector([1.0]), ParamVector([1.0, 2.0]), 0.5)

    def test_rejects_weight_outside_unit_interval(self):
        w = ParamVector([1.0])
        for bad in (-0.1, 1.1, math.nan):
            with pytest.raises(ValueError):
                mix(w, w, bad)

    @given(vec=vectors, beta_t=st.floats(min_value=0.0, max_value=1.0))
    def test_fixed_point(self, vec, beta_t):
        w = ParamVector(vec)
        assert np.array_equal(mix(w, w, beta_t).values, w.values)

    @given(a=vectors, b=vectors, beta_t=st.floats(min_value=0.0, max_value=1.0))
    def test_componentwise_bounded_and_dim_preserved(self, a, b, beta_t):
        n = min(len(a), len(b))
        prev, new = ParamVector(a[:n]), ParamVector(b[:n])
        out = mix(prev, new, beta_t)
        assert out.dim == n
        assert (out.values >= np.minimum(prev.values, new.values)).all()
        assert (out.values <= np.maximum(prev.values, new.values)).all()


class TestHyperparams:
    def test_imbalance_ratio(self):
        assert Hyperparams(h_min=2, h_max=6).imbalance_ratio == 3.0
        assert Hyperparams(h_min=3, h_max=3).imbalance_ratio == 1.0

    def test_degenerate_settings_admitted(self):
        assert Hyperparams(beta=1.0).beta == 1.0
        assert Hyperparams(h_min=0, h_max=2).h_min == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"eta": 0.0},
            {"eta": -1.0},
            {"beta": 0.0},
            {"beta": 1.2},
            {"a": -0.5},
            {"theta": -0.1},
            {"h_min": 4, "h_max": 3},
            {"h_min": -1},
            {"e_total": 0},
            {"k_bound": -1},
            {"batch_size": 0},
            {"momentum": 1.0},
            {"momentum": -0.2},
            {"alpha_kd": 1.5},
            {"seed": -1},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            Hyperparams(**kwargs)


class TestStateTypes:
    def test_client_update_rejects_negative_tau(self):
        with pytest.raises(ProtocolViolationError):
            ClientUpdate(ParamVector([1.0]), tau=-1, client_id="c", local_iterations_done=1)

    def test_global_state_counts_must_agree(self):
        with pytest.raises(ValueError):
            GlobalState(ParamVector([0.0]), t=2, aggregations=1)

    def test_global_state_defaults(self):
        s = GlobalState(ParamVector([0.0]))
        assert s.t == 0 and s.aggregations == 0 and s.max_staleness_seen == 0


class TestRngDerivation:
    def test_same_stream_reproduces(self):
        a = derive_rng(42, 4, 0).standard_normal(5)
        b = derive_rng(42, 4, 0).standard_normal(5)
        assert np.array_equal(a, b)

    def test_streams_are_distinct(self):
        a = derive_rng(42, 4, 0).standard_normal(5)
        b = derive_rng(42, 4, 1).standard_normal(5)
        c = derive_rng(43, 4, 0).standard_normal(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
