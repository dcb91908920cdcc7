import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TIGHT, random_case, relative_error
from xlalign import layer_scheduler as sched
from xlalign.projector_net import (
    LossBreakdown,
    NumericalFailure,
    ProjectorParams,
    SolverSettings,
    backward,
    forward,
    init_params,
    load_checkpoint,
    make_pairing,
    save_checkpoint,
    surrogate_ce_loss,
    total_loss,
    train_step,
)
from xlalign.sequences import ParallelPair, TokenSequence


def utt(rows, lang, sid=0, mask=None):
    return TokenSequence(np.asarray(rows, float), mask, lang, sid)


class TestForward:
    def test_zero_input(self):
        p = init_params(4, 3, 5, seed=1)
        p.cls_bias[:] = np.arange(5)
        tr = forward(p, utt(np.zeros((2, 4)), "en"))
        assert len(tr.layers) == 3
        assert all(np.all(h == 0) for h in tr.layers)
        np.testing.assert_array_equal(tr.logits, np.arange(5))

    def test_deterministic(self):
        x = utt(np.random.default_rng(0).standard_normal((5, 4)), "en")
        a = forward(init_params(4, 3, 2, seed=7), x)
        b = forward(init_params(4, 3, 2, seed=7), x)
        assert all(np.array_equal(u, v) for u, v in zip(a.layers, b.layers))
        assert np.array_equal(a.logits, b.logits)

    def test_masked_tokens_ignored_in_pool(self):
        p = init_params(3, 2, 2, seed=0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 3))
        y = x.copy()
        y[2] = 100.0
        mask = np.array([1, 1, 0, 1], bool)
        a, b = forward(p, utt(x, "en", mask=mask)), forward(p, utt(y, "en", mask=mask))
        np.testing.assert_array_equal(a.pooled_top, b.pooled_top)
        assert a.layer_sequence(2).mask.tolist() == mask.tolist()

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim"):
            forward(init_params(4, 2, 2), utt(np.zeros((1, 3)), "en"))

    def test_needs_two_layers(self):
        with pytest.raises(ValueError):
            init_params(4, 1, 2)


class TestSurrogateCE:
    def test_uniform(self):
        p = init_params(3, 2, 7)
        p.cls_weight[:] = 0
        loss, _ = surrogate_ce_loss(forward(p, utt(np.ones((1, 3)), "en")), 2)
        assert loss == pytest.approx(math.log(7))

    def test_hand_evaluation(self):
        p = init_params(2, 2, 2)
        p.cls_weight[:] = 0
        loss, g = surrogate_ce_loss(forward(p, utt(np.ones((1, 2)), "en")), 0)
        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(g, [-0.5, 0.5])

    def test_confident(self):
        p = init_params(2, 2, 3)
        p.cls_weight[:] = 0
        p.cls_bias[:] = [100.0, 0.0, 0.0]
        assert surrogate_ce_loss(forward(p, utt(np.ones((1, 2)), "en")), 0)[0] < 1e-12

    def test_label_range(self):
        with pytest.raises(ValueError):
            surrogate_ce_loss(forward(init_params(2, 2, 3), utt(np.ones((1, 2)), "en")), 3)


class TestLoss:
    def setup_method(self):
        self.params, self.pair = random_case(np.random.default_rng(0), 4, 3, 3, 4, 5)

    def test_alpha_zero(self):
        b = total_loss(self.params, self.pair, [], 0.0)
        assert b.total == b.ce and b.ot_by_layer == {}

    def test_single_layer(self):
        b = total_loss(self.params, self.pair, [2], 3.0)
        assert b.total == b.ce + 3.0 * b.ot_by_layer[2]

    def test_identity_of_breakdown(self):
        b = total_loss(self.params, self.pair, [1, 3], 10.0)
        assert b.total == b.ce + 10.0 / 2 * (b.ot_by_layer[1] + b.ot_by_layer[3])

    def test_empty_set_with_alpha(self):
        with pytest.raises(ValueError, match="empty"):
            total_loss(self.params, self.pair, [], 1.0)

    def test_out_of_range_layer(self):
        with pytest.raises(ValueError, match="outside"):
            total_loss(self.params, self.pair, [4], 1.0)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            LossBreakdown(1.0, {}, -1.0)

    def test_identical_utterances_transport_near_zero(self):
        from xlalign.sinkhorn_ot import cosine_cost, sinkhorn_solve

        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4)) * 2
        pair = ParallelPair(utt(x, "en"), utt(x.copy(), "ja"))
        tr = forward(self.params, pair.first)
        seq = tr.layer_sequence(2)
        r = sinkhorn_solve(cosine_cost(seq, seq), 1e-3, max_iter=20000)
        assert r.transport_cost < 1e-2


class TestBackward:
    def test_alpha_zero_is_pure_ce(self):
        params, pair = random_case(np.random.default_rng(1), 3, 2, 2, 3, 3)
        a = backward(params, pair, [], 0.0)
        b = backward(params, pair, [1], 0.0)
        assert a == b

    def test_spec_instance(self):
        params, pair = random_case(np.random.default_rng(2), 8, 3, 3, 4, 5)
        assert relative_error(params, pair, [2], 10.0) < 1e-3

    def test_stop_gradient_is_additive(self):
        params, pair = random_case(np.random.default_rng(4), 4, 3, 3, 4, 5)
        ce = backward(params, pair, [2], 0.0, **TIGHT).to_vector()
        args = (params, pair, [2], 10.0, 0.1)
        none = backward(*args, flow=(False, False), **TIGHT).to_vector()
        first = backward(*args, flow=(True, False), **TIGHT).to_vector()
        second = backward(*args, flow=(False, True), **TIGHT).to_vector()
        both = backward(*args, flow=(True, True), **TIGHT).to_vector()
        np.testing.assert_array_equal(none, ce)
        np.testing.assert_allclose(both - ce, (first - ce) + (second - ce), atol=1e-12)
        assert np.abs(second - ce).max() > 1e-6

    def test_frozen_side_input_does_not_leak(self):
        # with the first side frozen, its OT contribution must vanish: changing only
        # the OT weight leaves the first side's share untouched
        rng = np.random.default_rng(5)
        params, pair = random_case(rng, 4, 3, 3, 4, 5)
        g1 = backward(params, pair, [1], 1.0, flow=(False, True), **TIGHT).to_vector()
        g10 = backward(params, pair, [1], 10.0, flow=(False, True), **TIGHT).to_vector()
        ce = backward(params, pair, [1], 0.0, **TIGHT).to_vector()
        solo = ParallelPair(pair.first, pair.second)
        np.testing.assert_allclose(g10 - ce, 10 * (g1 - ce), atol=1e-10)
        assert solo.semantic_id == pair.semantic_id


@settings(max_examples=8, deadline=None)
@given(
    st.integers(0, 2**31),
    st.sampled_from([0.0, 1.0, 10.0]),
    st.sampled_from([[1], [2], [1, 3]]),
    st.booleans(),
)
def test_gradient_property(seed, alpha, layers, masked):
    rng = np.random.default_rng(seed)
    params, pair = random_case(rng, 3, 3, 3, int(rng.integers(2, 5)), int(rng.integers(2, 5)), masked)
    assert relative_error(params, pair, layers if alpha > 0 else [], alpha) < 1e-3


class TestPairing:
    def group(self, langs, sid=0):
        return {l: utt(np.ones((1, 2)), l, sid) for l in langs}

    def test_two_languages(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            (pair, flags), = make_pairing([self.group(["en", "ja"])], "random_pairwise", rng=rng)
            assert {pair.first.language_id, pair.second.language_id} == {"en", "ja"}
            assert flags == (True, True)

    def test_anchor_frozen_flags(self):
        out = make_pairing([self.group(["en", "ja", "ko"])], "anchor_frozen", "en")
        assert len(out) == 2
        assert all(p.first.language_id == "en" and f == (False, True) for p, f in out)

    def test_anchor_trained_flags(self):
        out = make_pairing([self.group(["en", "ja"])], "anchor_trained", "en")
        assert out[0][1] == (True, True)

    def test_missing_anchor(self):
        with pytest.raises(ValueError, match="anchor"):
            make_pairing([self.group(["ja", "ko"])], "anchor_frozen", "en")

    def test_uniform_pair_frequencies(self):
        langs = ["en", "ja", "es", "ko", "ru"]
        rng = np.random.default_rng(0)
        counts = {}
        group = self.group(langs)
        for _ in range(10000):
            (pair, _), = make_pairing([group], "random_pairwise", rng=rng)
            key = frozenset((pair.first.language_id, pair.second.language_id))
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 10
        assert all(abs(c / 10000 - 0.1) <= 0.01 for c in counts.values())


class TestTrainStep:
    def batch(self, seed=0):
        rng = np.random.default_rng(seed)
        pairs = []
        for sid in range(3):
            p = ParallelPair(utt(rng.standard_normal((4, 4)), "en", sid), utt(rng.standard_normal((3, 4)), "ja", sid))
            pairs.append((p, (True, True)))
        return pairs

    def kwargs(self, **kw):
        base = dict(lr=0.1, alpha=10.0, solver=SolverSettings(), layer_strategy="ucb_lower", candidates=[1, 2], step=1)
        base.update(kw)
        return base

    def test_zero_lr(self):
        params = init_params(4, 3, 3, seed=0)
        s = sched.init_state([1, 2])
        res = train_step(params, self.batch(), s, **self.kwargs(lr=0.0))
        assert res.params == params and math.isfinite(res.losses.total)
        assert res.scheduler.step == 2 and len(res.layers) == 1

    def test_identical_pair_ot_update_vanishes(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 4)) * 3
        batch = [(ParallelPair(utt(x, "en"), utt(x.copy(), "ja")), (True, True))]
        params = init_params(4, 3, 1, seed=0)
        kw = self.kwargs(layer_strategy="single", candidates=[2], solver=SolverSettings(1e-3, 20000, 1e-9))
        with_ot = train_step(params, batch, None, **kw).params.to_vector()
        without = train_step(params, batch, None, **{**kw, "alpha": 0.0}).params.to_vector()
        assert np.abs(with_ot - without).max() < 1e-3 * 0.1

    def test_fixed_strategies_and_alpha_zero(self):
        params = init_params(4, 3, 3)
        assert train_step(params, self.batch(), None, **self.kwargs(layer_strategy="multi", candidates=[1, 3])).layers == [1, 3]
        assert train_step(params, self.batch(), None, **self.kwargs(alpha=0.0, layer_strategy="multi")).layers == []
        r = train_step(params, self.batch(), None, **self.kwargs(layer_strategy="random", candidates=[1, 2, 3], step=5))
        assert r.layers[0] in (1, 2, 3)

    def test_non_finite_raises_with_step(self):
        params = init_params(4, 3, 3)
        bad = params.copy()
        bad.cls_bias[0] = np.inf
        with np.errstate(all="ignore"), pytest.raises(NumericalFailure) as info:
            train_step(bad, self.batch(), None, **self.kwargs(layer_strategy="single", candidates=[1], step=12))
        assert info.value.step == 12

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(init_params(4, 3, 3), [], None, **self.kwargs())


def test_checkpoint_round_trip(tmp_path):
    params = init_params(4, 3, 3, seed=2)
    s, _ = sched.observe(sched.init_state([1, 2]), 1, 0.25)
    save_checkpoint(tmp_path / "ck.json", params, s, 17)
    p2, s2, step = load_checkpoint(tmp_path / "ck.json")
    assert p2 == params and s2 == s and step == 17
    assert isinstance(p2, ProjectorParams)
