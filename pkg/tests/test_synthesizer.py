import numpy as np
import pytest

import convprosody.numerics as nm
from convprosody.errors import ContractError, ShapeError
from convprosody.numerics import Tensor, backward, grad_check
from convprosody.synthesizer import (
    InteractionFeatureSet,
    SynthParams,
    aggregate_features,
    encode_phonemes,
    init_synth_params,
    length_regulate,
    predict_variance,
    variance_tensors,
)

from reference import ref_head, ref_phoneme_encoder


def make_params(seed=0, vocab=6, d_m=4, zero=False):
    params = init_synth_params(vocab, d_m, np.random.default_rng(seed))
    if zero:
        for t in params.tensors().values():
            t.data[:] = 0.0
    return params


def as_ref_synth(p: SynthParams):
    return {
        "phoneme_table": p.phoneme_table.data,
        "fwd": {k: t.data for k, t in p.fwd.tensors().items()},
        "bwd": {k: t.data for k, t in p.bwd.tensors().items()},
        "out_w": p.out_w.data, "out_b": p.out_b.data,
    }


class TestEncodePhonemes:
    def test_single_position(self):
        out = encode_phonemes([3], make_params())
        assert out.shape == (1, 4)

    def test_distinct_ids_give_distinct_rows(self):
        params = make_params(seed=1)
        out = encode_phonemes([0, 1], params).data
        assert not np.allclose(out[0], out[1])
        swapped = encode_phonemes([1, 0], params).data
        assert not np.allclose(out, swapped)

    def test_matches_reference(self):
        params = make_params(seed=2)
        ids = [0, 3, 5]
        out = encode_phonemes(ids, params)
        np.testing.assert_allclose(out.data, ref_phoneme_encoder(ids, as_ref_synth(params)), rtol=1e-10)

    def test_contract_errors(self):
        params = make_params()
        with pytest.raises(ContractError):
            encode_phonemes([], params)
        with pytest.raises(ContractError, match="6"):
            encode_phonemes([0, 6], params)


class TestAggregateFeatures:
    def test_all_absent_is_identity(self):
        p = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
        out = aggregate_features(p, InteractionFeatureSet())
        np.testing.assert_array_equal(out.data, p.data)

    def test_zero_features_are_identity(self):
        p = Tensor(np.random.default_rng(4).normal(size=(3, 4)))
        zero = Tensor(np.zeros((2, 4)))
        feats = InteractionFeatureSet(f_t_intra=zero, f_s_intra=zero, f_t_inter=zero, f_s_inter=zero)
        np.testing.assert_allclose(aggregate_features(p, feats).data, p.data)

    def test_unit_basis_sum(self):
        p = Tensor(np.zeros((3, 4)))
        basis = [np.eye(4)[i:i + 1] for i in range(4)]
        feats = InteractionFeatureSet(
            f_t_intra=Tensor(basis[0]), f_s_intra=Tensor(basis[1]),
            f_t_inter=Tensor(basis[2]), f_s_inter=Tensor(basis[3]))
        out = aggregate_features(p, feats).data
        np.testing.assert_array_equal(out, np.ones((3, 4)))

    def test_uses_final_prefix_row(self):
        p = Tensor(np.zeros((2, 3)))
        f = Tensor(np.array([[1.0, 1.0, 1.0], [2.0, 0.0, 0.0]]))
        out = aggregate_features(p, InteractionFeatureSet(f_t_intra=f)).data
        np.testing.assert_array_equal(out, [[2.0, 0.0, 0.0]] * 2)

    def test_ablated_module_shrinks_sum(self):
        p = Tensor(np.zeros((2, 3)))
        a = Tensor(np.ones((1, 3)))
        both = aggregate_features(p, InteractionFeatureSet(f_t_intra=a, f_s_intra=a)).data
        one = aggregate_features(p, InteractionFeatureSet(f_t_intra=a)).data
        np.testing.assert_array_equal(both, 2 * one)

    def test_additivity_is_position_constant(self):
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=(5, 4)))
        f = Tensor(rng.normal(size=(3, 4)))
        out = aggregate_features(p, InteractionFeatureSet(f_s_inter=f)).data
        delta = out - p.data
        np.testing.assert_allclose(delta, np.tile(delta[0], (5, 1)), rtol=1e-12)

    def test_dim_mismatch(self):
        p = Tensor(np.zeros((2, 3)))
        f = Tensor(np.ones((1, 4)))
        with pytest.raises(ShapeError):
            aggregate_features(p, InteractionFeatureSet(f_t_intra=f))


class TestPredictVariance:
    def test_zero_weights_zero_predictions(self):
        params = make_params(zero=True)
        p = Tensor(np.random.default_rng(6).normal(size=(5, 4)))
        pred = predict_variance(p, params)
        np.testing.assert_array_equal(pred.pitch, np.zeros(5))
        np.testing.assert_array_equal(pred.energy, np.zeros(5))
        np.testing.assert_array_equal(pred.log_duration, np.zeros(5))
        assert pred.regulated_length == 5  # exp(0) = 1 per position

    def test_identical_rows_identical_predictions(self):
        params = make_params(seed=7)
        params.pitch.w2.data[:] = 0.3  # nonzero head output
        row = np.random.default_rng(8).normal(size=4)
        pred = predict_variance(Tensor(np.tile(row, (3, 1))), params)
        assert pred.pitch[0] == pred.pitch[1] == pred.pitch[2]

    def test_matches_reference_heads(self):
        params = make_params(seed=9)
        for head in (params.pitch, params.energy, params.log_duration):
            head.w2.data[:] = np.random.default_rng(10).normal(size=head.w2.shape)
        p = np.random.default_rng(11).normal(size=(2, 4))
        pitch, energy, logdur = variance_tensors(Tensor(p), params)
        h = params.pitch
        np.testing.assert_allclose(
            pitch.data, ref_head(p, h.w1.data, h.b1.data, h.w2.data, h.b2.data), rtol=1e-10)
        h = params.log_duration
        np.testing.assert_allclose(
            logdur.data, ref_head(p, h.w1.data, h.b1.data, h.w2.data, h.b2.data), rtol=1e-10)

    def test_regulated_length_rule(self):
        params = make_params(zero=True)
        pred = predict_variance(Tensor(np.zeros((2, 4))), params)
        assert pred.regulated_length == 2
        # log durations of [log 3, large negative] -> 3 + 1
        import convprosody.synthesizer as synth
        assert synth.regulated_length(np.array([np.log(3.0), -10.0])) == 4

    def test_heads_gradcheck(self):
        params = make_params(seed=12)
        rng = np.random.default_rng(13)
        for head in (params.pitch, params.energy, params.log_duration):
            head.w2.data[:] = rng.normal(size=head.w2.shape)
        p = Tensor(rng.normal(size=(3, 4)))
        probe = Tensor(rng.normal(size=3))
        for name, tensor in params.pitch.tensors().items():
            def f(_):
                pitch, _, _ = variance_tensors(p, params)
                return nm.dot(pitch, probe)

            err = grad_check(f, tensor, eps=1e-6)
            assert err <= 1e-4, f"pitch.{name}: {err}"


class TestLengthRegulate:
    def test_unit_durations_identity(self):
        p = Tensor(np.random.default_rng(14).normal(size=(3, 2)))
        out = length_regulate(p, [1, 1, 1])
        np.testing.assert_array_equal(out.data, p.data)

    def test_repeat_pattern(self):
        p = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        out = length_regulate(p, [2, 3])
        expected = np.array([[1.0, 0.0]] * 2 + [[0.0, 1.0]] * 3)
        np.testing.assert_array_equal(out.data, expected)

    def test_length_conservation(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            n = int(rng.integers(1, 6))
            p = Tensor(rng.normal(size=(n, 3)))
            durations = rng.integers(1, 8, size=n)
            assert length_regulate(p, durations).shape[0] == durations.sum()

    def test_rejects_nonpositive(self):
        p = Tensor(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            length_regulate(p, [1, 0])


class TestGradientFlowToInteractionInputs:
    def test_variance_loss_reaches_aggregated_features(self):
        params = make_params(seed=16)
        rng = np.random.default_rng(17)
        feats = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        p = encode_phonemes([0, 1, 2], params)
        agg = aggregate_features(p, InteractionFeatureSet(f_t_intra=feats))
        pitch, energy, logdur = variance_tensors(agg, params)
        params.pitch.w2.data[:] = rng.normal(size=params.pitch.w2.shape)
        pitch, _, _ = variance_tensors(agg, params)
        loss = nm.mse(pitch, Tensor(rng.normal(size=3)))
        backward(loss)
        assert feats.grad is not None and np.abs(feats.grad).sum() > 0
        assert params.phoneme_table.grad is not None
