import numpy as np
import pytest

import convprosody.numerics as nm
from convprosody.encoders import EncoderParams, GRUDirection, encode_sequence, gru_cell, init_encoder_params
from convprosody.errors import ContractError, ShapeError
from convprosody.numerics import Tensor, grad_check

from reference import ref_encode_sequence, ref_gru_cell


def make_direction(d_in, d_h, rng=None, zero=False):
    def w(shape):
        if zero:
            return Tensor(np.zeros(shape), requires_grad=True)
        return Tensor(rng.normal(scale=0.5, size=shape), requires_grad=True)

    return GRUDirection(
        w_z=w((d_in, d_h)), w_r=w((d_in, d_h)), w_h=w((d_in, d_h)),
        u_z=w((d_h, d_h)), u_r=w((d_h, d_h)), u_h=w((d_h, d_h)),
        b_z=w((d_h,)), b_r=w((d_h,)), b_h=w((d_h,)),
    )


def as_ref_dir(d: GRUDirection):
    return {k: t.data for k, t in d.tensors().items()}


def as_ref_enc(p: EncoderParams):
    return {
        "speaker_table": p.speaker_table.data,
        "fwd": as_ref_dir(p.fwd),
        "bwd": as_ref_dir(p.bwd),
        "proj1_w": p.proj1_w.data, "proj1_b": p.proj1_b.data,
        "proj2_w": p.proj2_w.data, "proj2_b": p.proj2_b.data,
    }


class TestGruCell:
    def test_all_zero_weights_and_state(self):
        d = make_direction(3, 3, zero=True)
        out = gru_cell(Tensor(np.ones(3)), Tensor(np.zeros(3)), d)
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_carry_gate(self):
        # large negative update-gate bias freezes the state
        rng = np.random.default_rng(0)
        d = make_direction(3, 3, rng)
        d.b_z.data[:] = -50.0
        h = rng.normal(size=3)
        out = gru_cell(Tensor(rng.normal(size=3)), Tensor(h), d)
        np.testing.assert_allclose(out.data, h, atol=1e-12)

    def test_matches_reference_cell(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            d = make_direction(3, 3, rng)
            x, h = rng.normal(size=3), rng.normal(size=3)
            out = gru_cell(Tensor(x), Tensor(h), d)
            np.testing.assert_allclose(out.data, ref_gru_cell(x, h, as_ref_dir(d)), rtol=1e-12)

    def test_shape_errors(self):
        d = make_direction(3, 4, np.random.default_rng(2))
        with pytest.raises(ShapeError):
            gru_cell(Tensor(np.zeros(5)), Tensor(np.zeros(4)), d)
        with pytest.raises(ShapeError):
            gru_cell(Tensor(np.zeros(3)), Tensor(np.zeros(3)), d)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        d = make_direction(3, 3, rng)
        x0 = rng.normal(size=3)
        h0 = rng.normal(size=3)
        probe = rng.normal(size=3)

        for target in [d.w_z, d.u_h, d.b_r]:
            def f(p, target=target):
                out = gru_cell(Tensor(x0), Tensor(h0), d)
                return nm.dot(out, Tensor(probe))

            assert grad_check(f, target, eps=1e-6) <= 1e-6

        x = Tensor(x0.copy(), requires_grad=True)
        assert grad_check(lambda p: nm.dot(gru_cell(p, Tensor(h0), d), Tensor(probe)), x, eps=1e-6) <= 1e-6
        h = Tensor(h0.copy(), requires_grad=True)
        assert grad_check(lambda p: nm.dot(gru_cell(Tensor(x0), p, d), Tensor(probe)), h, eps=1e-6) <= 1e-6

    def test_recurrent_chain_gradient(self):
        # gradient flows through several chained cells
        rng = np.random.default_rng(4)
        d = make_direction(2, 2, rng)
        xs = rng.normal(size=(4, 2))
        probe = rng.normal(size=2)

        def f(p):
            h = Tensor(np.zeros(2))
            for i in range(4):
                h = gru_cell(Tensor(xs[i]), h, d)
            return nm.dot(h, Tensor(probe))

        assert grad_check(f, d.u_z, eps=1e-6) <= 1e-5


class TestEncodeSequence:
    def make_params(self, seed=0, num_speakers=2, d_in=4, d_h=4, d_m=3):
        rng = np.random.default_rng(seed)
        return init_encoder_params(num_speakers, d_in, d_h, d_m, rng)

    def test_matches_reference(self):
        params = self.make_params(seed=5)
        rng = np.random.default_rng(6)
        feats = [rng.normal(size=4) for _ in range(3)]
        ids = [0, 1, 0]
        for contextual in (True, False):
            out = encode_sequence(feats, ids, params, contextual=contextual)
            expected = ref_encode_sequence(feats, ids, as_ref_enc(params), contextual)
            np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_length_one_modes_coincide(self):
        params = self.make_params(seed=7)
        feats = [np.random.default_rng(8).normal(size=4)]
        a = encode_sequence(feats, [1], params, contextual=True)
        b = encode_sequence(feats, [1], params, contextual=False)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-12)

    def test_permutation_sensitivity(self):
        params = self.make_params(seed=9)
        rng = np.random.default_rng(10)
        feats = [rng.normal(size=4) for _ in range(3)]
        ids = [0, 1, 0]
        perm_feats = [feats[2], feats[0], feats[1]]
        perm_ids = [0, 0, 1]

        ctx = encode_sequence(feats, ids, params, contextual=True).data
        ctx_p = encode_sequence(perm_feats, perm_ids, params, contextual=True).data
        assert not np.allclose(ctx[0], ctx_p[1])  # contextual outputs change

        solo = encode_sequence(feats, ids, params, contextual=False).data
        solo_p = encode_sequence(perm_feats, perm_ids, params, contextual=False).data
        np.testing.assert_allclose(solo[0], solo_p[1], rtol=1e-12)
        np.testing.assert_allclose(solo[2], solo_p[0], rtol=1e-12)

    def test_output_width_is_d_m(self):
        params = self.make_params(seed=11, d_m=5)
        rng = np.random.default_rng(12)
        for n in (1, 2, 4):
            out = encode_sequence([rng.normal(size=4) for _ in range(n)], [i % 2 for i in range(n)], params)
            assert out.shape == (n, 5)

    def test_speaker_embedding_is_live(self):
        params = self.make_params(seed=13)
        rng = np.random.default_rng(14)
        feats = [rng.normal(size=4) for _ in range(2)]
        a = encode_sequence(feats, [0, 1], params).data
        b = encode_sequence(feats, [0, 0], params).data
        assert not np.allclose(a[1], b[1])

    def test_contract_errors(self):
        params = self.make_params()
        with pytest.raises(ContractError):
            encode_sequence([], [], params)
        with pytest.raises(ContractError, match="9"):
            encode_sequence([np.zeros(4)], [9], params)
        with pytest.raises(ContractError):
            encode_sequence([np.zeros(4)], [0, 1], params)

    def test_gradcheck_all_params(self):
        # d_in = d_h = 3, d_m = 2 sweep over every parameter tensor
        rng = np.random.default_rng(15)
        params = init_encoder_params(2, 3, 3, 2, rng)
        feats = [rng.normal(size=3) for _ in range(3)]
        ids = [0, 1, 0]
        probe = Tensor(rng.normal(size=(3, 2)))

        for name, tensor in params.tensors().items():
            def f(p):
                out = encode_sequence(feats, ids, params, contextual=True)
                return nm.tsum(nm.mul(out, probe))

            err = grad_check(f, tensor, eps=1e-6)
            assert err <= 1e-4, f"{name}: {err}"
