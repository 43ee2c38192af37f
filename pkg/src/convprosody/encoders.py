"""Speaker-embedded Bi-GRU sentence-sequence encoders.

One parameter set per modality serves both the historical encoder
(contextual: bidirectional recurrence over the whole utterance sequence)
and the next-utterance encoder (non-contextual: each utterance run as a
length-1 sequence through the same weights). Per-position outputs are
concatenated across directions and reduced to the shared interaction
width by two tanh-activated linear layers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nm
from .errors import ContractError, ShapeError
from .numerics import Tensor


@dataclass
class GRUDirection:
    """Weights for one recurrence direction.

    Input-to-hidden maps are [d_in, d_h] and apply as x @ W; hidden-to-
    hidden maps are [d_h, d_h].
    """

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def tensors(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EncoderParams:
    speaker_table: Tensor  # [num_speakers, d_in]
    fwd: GRUDirection
    bwd: GRUDirection
    proj1_w: Tensor  # [2*d_h, d_m]
    proj1_b: Tensor
    proj2_w: Tensor  # [d_m, d_m]
    proj2_b: Tensor

    @property
    def d_in(self):
        return self.speaker_table.shape[1]

    @property
    def d_h(self):
        return self.fwd.u_z.shape[0]

    @property
    def d_m(self):
        return self.proj2_w.shape[1]

    @property
    def num_speakers(self):
        return self.speaker_table.shape[0]

    def tensors(self):
        out = {"speaker_table": self.speaker_table}
        for direction, prefix in ((self.fwd, "fwd"), (self.bwd, "bwd")):
            for name, tensor in direction.tensors().items():
                out[f"{prefix}.{name}"] = tensor
        out.update(
            proj1_w=self.proj1_w, proj1_b=self.proj1_b,
            proj2_w=self.proj2_w, proj2_b=self.proj2_b,
        )
        return out


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_gru_direction(d_in, d_h, rng, dtype):
    k = 1.0 / np.sqrt(d_h)
    return GRUDirection(
        w_z=_uniform(rng, (d_in, d_h), k, dtype),
        w_r=_uniform(rng, (d_in, d_h), k, dtype),
        w_h=_uniform(rng, (d_in, d_h), k, dtype),
        u_z=_uniform(rng, (d_h, d_h), k, dtype),
        u_r=_uniform(rng, (d_h, d_h), k, dtype),
        u_h=_uniform(rng, (d_h, d_h), k, dtype),
        b_z=_zeros((d_h,), dtype),
        b_r=_zeros((d_h,), dtype),
        b_h=_zeros((d_h,), dtype),
    )


def init_encoder_params(num_speakers, d_in, d_h, d_m, rng, dtype=np.float64):
    table = Tensor((0.1 * rng.standard_normal((num_speakers, d_in))).astype(dtype), requires_grad=True)
    k1 = 1.0 / np.sqrt(2 * d_h)
    k2 = 1.0 / np.sqrt(d_m)
    return EncoderParams(
        speaker_table=table,
        fwd=init_gru_direction(d_in, d_h, rng, dtype),
        bwd=init_gru_direction(d_in, d_h, rng, dtype),
        proj1_w=_uniform(rng, (2 * d_h, d_m), k1, dtype),
        proj1_b=_zeros((d_m,), dtype),
        proj2_w=_uniform(rng, (d_m, d_m), k2, dtype),
        proj2_b=_zeros((d_m,), dtype),
    )


def gru_cell(x, h_prev, params: GRUDirection):
    """One GRU update:

        z = sigma(x W_z + h U_z + b_z)
        r = sigma(x W_r + h U_r + b_r)
        c = tanh(x W_h + (r*h) U_h + b_h)
        h' = (1 - z)*h + z*c

    Recorded as a single fused tape node; the backward pass applies the
    chain rule through all gates in one closure (this cell is the hot
    loop of every encoder).
    """
    x = nm.as_tensor(x)
    h_prev = nm.as_tensor(h_prev)
    w_z, w_r, w_h = params.w_z, params.w_r, params.w_h
    u_z, u_r, u_h = params.u_z, params.u_r, params.u_h
    b_z, b_r, b_h = params.b_z, params.b_r, params.b_h
    if x.ndim != 1 or x.shape[0] != w_z.shape[0]:
        raise ShapeError(f"gru_cell input shape {x.shape} does not match weights {w_z.shape}")
    if h_prev.ndim != 1 or h_prev.shape[0] != u_z.shape[0]:
        raise ShapeError(f"gru_cell state shape {h_prev.shape} does not match weights {u_z.shape}")

    xd, hd = x.data, h_prev.data
    with np.errstate(over="ignore"):
        z = 1.0 / (1.0 + np.exp(-(xd @ w_z.data + hd @ u_z.data + b_z.data)))
        r = 1.0 / (1.0 + np.exp(-(xd @ w_r.data + hd @ u_r.data + b_r.data)))
    rh = r * hd
    c = np.tanh(xd @ w_h.data + rh @ u_h.data + b_h.data)
    out = (1.0 - z) * hd + z * c

    parents = (x, h_prev, w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h)
    if not nm._live(*parents):
        return nm._const(out)

    def backward_fn(g, x=x, h_prev=h_prev, params=params, xd=xd, hd=hd, z=z, r=r, rh=rh, c=c):
        dz = g * (c - hd) * z * (1.0 - z)
        dc = g * z * (1.0 - c * c)
        dh = g * (1.0 - z)
        drh = dc @ params.u_h.data.T
        dr = drh * hd * r * (1.0 - r)
        dh += drh * r
        dh += dz @ params.u_z.data.T
        dh += dr @ params.u_r.data.T
        if params.b_z.requires_grad:
            params.b_z._accum(dz)
            params.b_r._accum(dr)
            params.b_h._accum(dc)
        if params.w_z.requires_grad:
            params.w_z._accum(np.outer(xd, dz))
            params.w_r._accum(np.outer(xd, dr))
            params.w_h._accum(np.outer(xd, dc))
            params.u_z._accum(np.outer(hd, dz))
            params.u_r._accum(np.outer(hd, dr))
            params.u_h._accum(np.outer(rh, dc))
        if x.requires_grad:
            x._accum(dz @ params.w_z.data.T + dr @ params.w_r.data.T + dc @ params.w_h.data.T)
        if h_prev.requires_grad:
            h_prev._accum(dh)

    return nm._op(out, parents, backward_fn)


def _run_direction(rows, params: GRUDirection, reverse=False):
    d_h = params.u_z.shape[0]
    h = nm._const(np.zeros(d_h, dtype=rows[0].dtype))
    states = []
    order = reversed(rows) if reverse else rows
    for x in order:
        h = gru_cell(x, h, params)
        states.append(h)
    if reverse:
        states.reverse()
    return states


def encode_sequence(features, speaker_ids, params: EncoderParams, contextual=True):
    """Encode a sequence of sentence-level feature vectors.

    Each feature gets its speaker embedding added, then either a Bi-GRU
    over the whole sequence (contextual=True: output at position i sees
    the entire dialogue prefix and suffix) or an independent length-1
    pass per position (contextual=False). Both modes finish with the
    shared two-layer tanh projection to d_m.

    Returns a matrix whose row i is the d_m-dimensional encoding of
    utterance i.
    """
    features = list(features)
    speaker_ids = list(speaker_ids)
    if not features:
        raise ContractError("encode_sequence requires at least one utterance")
    if len(features) != len(speaker_ids):
        raise ContractError(
            f"{len(features)} feature vectors but {len(speaker_ids)} speaker ids")
    for sid in speaker_ids:
        if not 0 <= int(sid) < params.num_speakers:
            raise ContractError(f"unknown speaker id {sid} (table has {params.num_speakers})")
    feats = nm.stack_rows([nm.as_tensor(f) for f in features])
    if feats.shape[1] != params.d_in:
        raise ShapeError(f"feature dim {feats.shape[1]} does not match encoder d_in {params.d_in}")
    x = nm.add(feats, nm.gather_rows(params.speaker_table, speaker_ids))
    rows = [nm.index_row(x, i) for i in range(len(features))]
    if contextual:
        fwd_states = _run_direction(rows, params.fwd)
        bwd_states = _run_direction(rows, params.bwd, reverse=True)
    else:
        fwd_states = [gru_cell(r, _fresh_state(params, r), params.fwd) for r in rows]
        bwd_states = [gru_cell(r, _fresh_state(params, r), params.bwd) for r in rows]
    both = nm.stack_rows([nm.concat([f, b]) for f, b in zip(fwd_states, bwd_states)])
    hidden = nm.tanh(nm.add(nm.matmul(both, params.proj1_w), params.proj1_b))
    return nm.tanh(nm.add(nm.matmul(hidden, params.proj2_w), params.proj2_b))


def _fresh_state(params, row):
    return nm._const(np.zeros(params.d_h, dtype=row.dtype))
