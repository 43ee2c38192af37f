"""Context interaction modules over dialogue history.

Four module kinds pair a history modality with a next-utterance
modality: text->text and speech->speech capture within-modality
influence; text->speech and speech->text capture cross-modality
influence. Each kind runs cumulative cross-attention over the history
encodings ("interaction enhancement") and, during training, aligns the
resulting prefix features with the next-utterance encodings through a
cosine-similarity matrix regressed toward +1 on the diagonal and -1
elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoders import encode_sequence
from .errors import ContractError, ShapeError
from .numerics import Tensor

# module kind -> (history modality, next modality)
KINDS = ("ht_nt", "hs_ns", "ht_ns", "hs_nt")
KIND_MODALITIES = {
    "ht_nt": ("text", "text"),
    "hs_ns": ("speech", "speech"),
    "ht_ns": ("text", "speech"),
    "hs_nt": ("speech", "text"),
}


@dataclass
class IEParams:
    """Query/key/value projections for one interaction module."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def tensors(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


def init_ie_params(d_m, rng, dtype=np.float64):
    k = 1.0 / np.sqrt(d_m)

    def w():
        return Tensor(rng.uniform(-k, k, size=(d_m, d_m)).astype(dtype), requires_grad=True)

    return IEParams(w_q=w(), w_k=w(), w_v=w())


def cross_attention(query, context, params: IEParams):
    """Single-head scaled dot-product attention of one query over a context.

    scores_j = (q W_q) . (c_j W_k) / sqrt(d_m); output = sum softmax(scores)_j (c_j W_v)
    """
    query = nm.as_tensor(query)
    if query.ndim != 1:
        raise ShapeError(f"query must be a vector, got shape {query.shape}")
    if not isinstance(context, Tensor):
        context = nm.stack_rows([nm.as_tensor(c) for c in context]) if len(context) else None
    if context is None or context.shape[0] == 0:
        raise ContractError("cross_attention requires a nonempty context")
    d_m = query.shape[0]
    qp = nm.matmul(query, params.w_q)
    keys = nm.matmul(context, params.w_k)
    values = nm.matmul(context, params.w_v)
    scores = nm.mul(nm.matmul(keys, qp), 1.0 / math.sqrt(d_m))
    weights = nm.softmax(scores)
    return nm.matmul(weights, values)


def interaction_enhance(history, params: IEParams, ie_enabled=True):
    """Prefix interaction features from per-utterance history encodings.

    Row k of the result summarizes utterances 1..k+1: row 0 is the raw
    first encoding; with enhancement enabled, later rows are
    layer_norm(H_k + attention of H_k over all earlier rows). With
    enhancement disabled the rows degrade to running prefix means.
    """
    history = _as_matrix(history)
    n = history.shape[0]
    if n == 0:
        raise ContractError("interaction_enhance requires a nonempty history")
    if not ie_enabled:
        return nm.stack_rows(
            [nm.mean_rows(nm.slice_rows(history, 0, k + 1)) for k in range(n)]
        )
    if n == 1:
        return history
    d_m = history.shape[1]
    inv_sqrt = 1.0 / math.sqrt(d_m)
    keys = nm.matmul(history, params.w_k)
    values = nm.matmul(history, params.w_v)
    rows = [nm.index_row(history, 0)]
    for k in range(1, n):
        q = nm.index_row(history, k)
        qp = nm.matmul(q, params.w_q)
        scores = nm.mul(nm.matmul(nm.slice_rows(keys, 0, k), qp), inv_sqrt)
        att = nm.matmul(nm.softmax(scores), nm.slice_rows(values, 0, k))
        rows.append(nm.layer_norm(nm.add(q, att)))
    return nm.stack_rows(rows)


def ground_truth_matrix(n, dtype=None):
    """+1 on the diagonal, -1 everywhere else."""
    if n < 1:
        raise ContractError(f"alignment matrix size must be >= 1, got {n}")
    data = -np.ones((n, n), dtype=dtype or nm.default_dtype())
    np.fill_diagonal(data, 1.0)
    return Tensor(data)


def build_prediction_matrix(features, next_encodings):
    """Pairwise cosine similarities: M[i][j] = cos(F_i, H_next_j)."""
    f = _as_matrix(features)
    h = _as_matrix(next_encodings)
    if f.shape[0] != h.shape[0]:
        raise ContractError(
            f"{f.shape[0]} prefix features but {h.shape[0]} next encodings")
    return nm.matmul(nm.normalize_rows(f), nm.transpose(nm.normalize_rows(h)))


@dataclass
class AlignmentMatrices:
    m_p: Tensor
    m_gt: Tensor


def contrastive_loss(m: AlignmentMatrices):
    """MSE between the prediction matrix and the +/-1 target matrix."""
    return nm.mse(m.m_p, m.m_gt)


@dataclass
class InteractionResult:
    features: Tensor       # [N-1, d_m] prefix interaction features
    loss: Tensor | None    # alignment loss; None on the inference path


def run_interaction_module(kind, dialogue, model, training=True):
    """Run one interaction module over a dialogue.

    History side: contextual encoding of utterances 1..N-1 in the kind's
    first modality, then interaction enhancement. Training additionally
    encodes utterances 2..N non-contextually in the second modality and
    scores the alignment loss; inference skips the next side entirely.
    """
    if kind not in KINDS:
        raise ContractError(f"unknown module kind {kind!r}; expected one of {KINDS}")
    utterances = dialogue.utterances
    if len(utterances) < 2:
        raise ContractError(f"dialogue must have at least 2 utterances, got {len(utterances)}")
    hist_mod, next_mod = KIND_MODALITIES[kind]
    encoder = model.encoder_for(hist_mod)
    hist = encode_sequence(
        _modality_features(utterances[:-1], hist_mod, model.dtype),
        [u.speaker_id for u in utterances[:-1]],
        encoder,
        contextual=True,
    )
    features = interaction_enhance(hist, model.ie[kind], model.config.ie_enabled)
    if not training:
        return InteractionResult(features=features, loss=None)
    next_enc = encode_sequence(
        _modality_features(utterances[1:], next_mod, model.dtype),
        [u.speaker_id for u in utterances[1:]],
        model.encoder_for(next_mod),
        contextual=False,
    )
    m_p = build_prediction_matrix(features, next_enc)
    m_gt = ground_truth_matrix(m_p.shape[0], dtype=m_p.dtype)
    return InteractionResult(features=features, loss=contrastive_loss(AlignmentMatrices(m_p, m_gt)))


def _as_matrix(x):
    if isinstance(x, Tensor):
        if x.ndim != 2:
            raise ShapeError(f"expected a matrix of row vectors, got shape {x.shape}")
        return x
    rows = list(x)
    if not rows:
        raise ContractError("expected at least one row vector")
    return nm.stack_rows([nm.as_tensor(r) for r in rows])


def _modality_features(utterances, modality, dtype):
    out = []
    for i, u in enumerate(utterances):
        feat = u.semantic if modality == "text" else u.prosodic
        if feat is None:
            raise ContractError(f"utterance {i} is missing its {modality} features")
        out.append(np.asarray(feat, dtype=dtype))
    return out
