import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phsa.analysis import (
    MapError,
    ParMatrix,
    attention_entropy,
    collect_maps,
    compute_par,
    entropy_le_log_t,
    max_within_map_std,
    par_symmetry_score,
    row_entropy,
    slope_report,
)
from phsa.attention import Drop
from phsa.encoder import ConfigError, EncoderConfig
from phsa.task import PhonemeInventory, generate_dataset, init_classifier
from phsa.verify import brute_force_par, random_par_instance

CFG = EncoderConfig(num_layers=2, num_heads=2, d_model=16, d_h=8, ffn_dim=32, num_phsa_layers=1)


class TestPar:
    def test_two_frame_example(self):
        a = np.array([[0.7, 0.3], [0.2, 0.8]])
        par = compute_par([a], [np.array([0, 1])], 2)
        np.testing.assert_array_equal(par.values, a)
        np.testing.assert_array_equal(par.support, [1, 1])

    def test_averages_over_queries(self):
        a = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.0]])
        par = compute_par([a], [np.array([0, 0, 1])], 3)
        np.testing.assert_allclose(par.values[0], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(par.values[1], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(par.values[2], 0.0)
        assert par.support[2] == 0 and not par.supported[2]

    def test_single_frame(self):
        par = compute_par([np.ones((1, 1))], [np.array([2])], 3)
        assert par.values[2, 2] == 1.0

    def test_exclude_silence(self):
        a = np.array([[0.5, 0.25, 0.25], [0.5, 0.25, 0.25], [0.5, 0.5, 0.0]])
        par = compute_par([a], [np.array([0, 1, 2])], 3, exclude_silence=True)
        assert par.support[0] == 0
        np.testing.assert_allclose(par.values[1], [0.0, 0.5, 0.5])
        np.testing.assert_allclose(par.values[2], [0.0, 1.0, 0.0])

    @pytest.mark.parametrize("maps, labels", [
        ([np.ones((2, 3)) / 3], [np.array([0, 1])]),
        ([np.eye(2)], [np.array([0, 1, 1])]),
        ([np.array([[0.9, 0.0], [0.5, 0.5]])], [np.array([0, 1])]),
        ([np.eye(2)], []),
    ])
    def test_rejects_malformed(self, maps, labels):
        with pytest.raises(MapError):
            compute_par(maps, labels, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_double_loop_oracle(self, seed):
        maps, labels, C = random_par_instance(np.random.default_rng(seed))
        par = compute_par(maps, labels, C)
        ref, support = brute_force_par(maps, labels, C)
        np.testing.assert_allclose(par.values, ref, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(par.support, support)
        np.testing.assert_allclose(par.values[par.supported].sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_relabelling_permutes_rows_and_columns(self, seed):
        rng = np.random.default_rng(seed)
        maps, labels, C = random_par_instance(rng)
        perm = rng.permutation(C)
        par = compute_par(maps, labels, C).values
        moved = compute_par(maps, [perm[l] for l in labels], C).values
        np.testing.assert_allclose(moved[np.ix_(perm, perm)], par, atol=1e-14)


class TestSymmetry:
    def _par(self, values):
        values = np.asarray(values, dtype=float)
        return ParMatrix(values, [str(i) for i in range(len(values))], np.ones(len(values), dtype=int))

    def test_symmetric_is_one(self):
        assert par_symmetry_score(self._par([[0.6, 0.4], [0.4, 0.6]])) == 1.0

    def test_single_off_diagonal_entry_is_zero(self):
        assert par_symmetry_score(self._par([[0.0, 1.0], [0.0, 0.0]])) == 0.0

    def test_unsupported_classes_ignored(self):
        par = self._par([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.9, 0.1, 0.0]])
        par.support[2] = 0
        assert par_symmetry_score(par) == 1.0

    @given(st.integers(0, 2**31 - 1))
    def test_bounded(self, seed):
        v = np.random.default_rng(seed).random((4, 4))
        assert 0.0 <= par_symmetry_score(self._par(v)) <= 1.0


class TestEntropy:
    def test_one_hot_rows(self):
        np.testing.assert_array_equal(row_entropy(np.eye(5)), 0.0)

    def test_uniform(self):
        np.testing.assert_allclose(row_entropy(np.full((4, 4), 0.25)), math.log(4), atol=1e-12)

    def test_hand_case(self):
        assert row_entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.5 * math.log(2), abs=1e-12)

    def test_report_aggregates(self):
        maps = [[np.stack([np.eye(3), np.full((3, 3), 1 / 3)])]]
        rep = attention_entropy(maps, "x")
        assert [(h.layer, h.head) for h in rep.heads] == [(0, 0), (0, 1)]
        assert rep.heads[0].mean == 0.0 and rep.heads[0].std == 0.0
        assert rep.heads[1].mean == pytest.approx(math.log(3), abs=1e-12)
        assert rep.mean == pytest.approx(math.log(3) / 2)
        assert rep.std_heads == pytest.approx(math.log(3) / 2)
        assert entropy_le_log_t(rep)

    def test_layer_selection(self):
        maps = [[np.eye(2)[None], np.full((1, 2, 2), 0.5)]]
        assert attention_entropy(maps, layers=[1]).mean == pytest.approx(math.log(2))

    def test_rejects(self):
        with pytest.raises(MapError):
            attention_entropy([])
        with pytest.raises(MapError):
            attention_entropy([[np.full((1, 2, 2), 0.7)]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bounded_by_log_t(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 12))
        a = rng.random((2, T, T))
        a /= a.sum(-1, keepdims=True)
        rep = attention_entropy([[a]])
        assert 0.0 <= rep.mean <= math.log(T) + 1e-12


@pytest.fixture(scope="module")
def model_and_data():
    data = generate_dataset(PhonemeInventory(), 4, (10, 16), 16, 0)
    return init_classifier(CFG, 16, 12), data


class TestModelAnalysis:
    def test_untrained_slopes_are_one(self, model_and_data):
        model, _ = model_and_data
        rep = slope_report(model, CFG)
        assert len(rep.rows) == CFG.num_phsa_layers * CFG.num_heads
        np.testing.assert_array_equal(rep.alpha_s, 1.0)
        np.testing.assert_array_equal(rep.alpha_c, 1.0)

    def test_slopes_need_phonetic_layers(self):
        cfg = EncoderConfig(num_layers=1, num_heads=2, d_model=16, d_h=8, ffn_dim=32)
        with pytest.raises(ConfigError):
            slope_report(init_classifier(cfg, 16, 12), cfg)

    def test_collected_maps_are_cropped(self, model_and_data):
        model, data = model_and_data
        maps, labels = collect_maps(model, data)
        for utt_maps, u, lab in zip(maps, data, labels):
            assert [m.shape for m in utt_maps] == [(2, u.T, u.T)] * 2
            np.testing.assert_array_equal(lab, u.labels)
            np.testing.assert_allclose(utt_maps[0].sum(-1), 1.0, atol=1e-5)

    def test_content_only_entropy_has_no_row_variance(self, model_and_data):
        model, data = model_and_data
        maps, _ = collect_maps(model, data, drop=Drop.SIMILARITY)
        for utt in maps:
            e = row_entropy(utt[0])
            np.testing.assert_allclose(e, e[..., :1] * np.ones_like(e), atol=1e-6)
        assert max_within_map_std(maps, layers=[0]) <= 1e-6


def test_within_map_std():
    same = np.tile(np.array([0.5, 0.25, 0.25]), (3, 1))[None]
    assert max_within_map_std([[same]]) == 0.0
    mixed = np.stack([np.eye(2), np.full((2, 2), 0.5)])
    assert max_within_map_std([[np.array([[[1.0, 0.0], [0.5, 0.5]]]), mixed]]) == pytest.approx(math.log(2) / 2)
