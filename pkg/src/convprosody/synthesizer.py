"""Target-utterance encoding and prosody prediction.

A phoneme embedding plus Bi-GRU encoder produces per-phoneme linguistic
encodings; the feature aggregator adds the four final-prefix interaction
vectors to every position; three two-layer heads then predict pitch,
energy, and log-duration per phoneme. Durations drive a length
regulator that expands encodings to frame count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoders import GRUDirection, _run_direction, init_gru_direction
from .errors import ContractError, ShapeError
from .numerics import Tensor


@dataclass
class VarianceHead:
    w1: Tensor  # [d_m, d_m]
    b1: Tensor
    w2: Tensor  # [d_m, 1]
    b2: Tensor

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class SynthParams:
    phoneme_table: Tensor  # [vocab, d_m]
    fwd: GRUDirection      # d_m -> d_m/2 per direction
    bwd: GRUDirection
    out_w: Tensor          # [d_m, d_m]
    out_b: Tensor
    pitch: VarianceHead
    energy: VarianceHead
    log_duration: VarianceHead

    @property
    def vocab(self):
        return self.phoneme_table.shape[0]

    @property
    def d_m(self):
        return self.phoneme_table.shape[1]

    def tensors(self):
        out = {"phoneme_table": self.phoneme_table, "out_w": self.out_w, "out_b": self.out_b}
        for direction, prefix in ((self.fwd, "fwd"), (self.bwd, "bwd")):
            for name, tensor in direction.tensors().items():
                out[f"{prefix}.{name}"] = tensor
        for head, prefix in ((self.pitch, "pitch"), (self.energy, "energy"),
                             (self.log_duration, "log_duration")):
            for name, tensor in head.tensors().items():
                out[f"{prefix}.{name}"] = tensor
        return out


def _init_head(d_m, rng, dtype):
    k = 1.0 / np.sqrt(d_m)
    # zero output layer: a fresh model predicts exactly the zero baseline
    return VarianceHead(
        w1=Tensor(rng.uniform(-k, k, size=(d_m, d_m)).astype(dtype), requires_grad=True),
        b1=Tensor(np.zeros(d_m, dtype=dtype), requires_grad=True),
        w2=Tensor(np.zeros((d_m, 1), dtype=dtype), requires_grad=True),
        b2=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )


def init_synth_params(vocab, d_m, rng, dtype=np.float64):
    if d_m % 2:
        raise ContractError(f"d_m must be even for the bidirectional phoneme encoder, got {d_m}")
    if vocab < 1:
        raise ContractError(f"vocab must be >= 1, got {vocab}")
    k = 1.0 / np.sqrt(d_m)
    return SynthParams(
        phoneme_table=Tensor(rng.standard_normal((vocab, d_m)).astype(dtype), requires_grad=True),
        fwd=init_gru_direction(d_m, d_m // 2, rng, dtype),
        bwd=init_gru_direction(d_m, d_m // 2, rng, dtype),
        out_w=Tensor(rng.uniform(-k, k, size=(d_m, d_m)).astype(dtype), requires_grad=True),
        out_b=Tensor(np.zeros(d_m, dtype=dtype), requires_grad=True),
        pitch=_init_head(d_m, rng, dtype),
        energy=_init_head(d_m, rng, dtype),
        log_duration=_init_head(d_m, rng, dtype),
    )


def encode_phonemes(ids, params: SynthParams):
    """Per-phoneme linguistic encodings: embedding -> Bi-GRU -> linear.

    Returns a matrix with one d_m row per phoneme position.
    """
    ids = list(ids)
    if not ids:
        raise ContractError("encode_phonemes requires a nonempty phoneme sequence")
    embedded = nm.gather_rows(params.phoneme_table, ids)
    rows = [nm.index_row(embedded, i) for i in range(len(ids))]
    fwd_states = _run_direction(rows, params.fwd)
    bwd_states = _run_direction(rows, params.bwd, reverse=True)
    both = nm.stack_rows([nm.concat([f, b]) for f, b in zip(fwd_states, bwd_states)])
    return nm.add(nm.matmul(both, params.out_w), params.out_b)


def aggregate_features(encodings, feature_set):
    """Add the four final-prefix interaction vectors to every position.

    ``feature_set`` is an InteractionFeatureSet; absent (ablated) entries
    contribute nothing. With all four absent the encodings pass through
    unchanged.
    """
    encodings = _require_matrix(encodings)
    context = None
    for feat in feature_set.final_vectors():
        if feat.shape != (encodings.shape[1],):
            raise ShapeError(
                f"interaction feature dim {feat.shape} does not match encoding width {encodings.shape[1]}")
        context = feat if context is None else nm.add(context, feat)
    if context is None:
        return encodings
    return nm.add(encodings, context)


@dataclass
class InteractionFeatureSet:
    """Per-kind prefix feature matrices; None marks an ablated module."""

    f_t_intra: Tensor | None = None  # ht_nt
    f_s_intra: Tensor | None = None  # hs_ns
    f_t_inter: Tensor | None = None  # ht_ns
    f_s_inter: Tensor | None = None  # hs_nt

    KIND_FIELDS = {
        "ht_nt": "f_t_intra",
        "hs_ns": "f_s_intra",
        "ht_ns": "f_t_inter",
        "hs_nt": "f_s_inter",
    }

    @classmethod
    def from_kinds(cls, features_by_kind):
        out = cls()
        for kind, feats in features_by_kind.items():
            setattr(out, cls.KIND_FIELDS[kind], feats)
        return out

    def final_vectors(self):
        """Last prefix row of each present feature matrix."""
        out = []
        for field in ("f_t_intra", "f_s_intra", "f_t_inter", "f_s_inter"):
            feats = getattr(self, field)
            if feats is not None:
                out.append(nm.index_row(feats, feats.shape[0] - 1))
        return out


@dataclass
class ProsodyPrediction:
    pitch: np.ndarray          # [L], normalized units
    energy: np.ndarray         # [L], normalized units
    log_duration: np.ndarray   # [L]
    regulated_length: int

    def to_dict(self):
        return {
            "pitch": self.pitch.tolist(),
            "energy": self.energy.tolist(),
            "log_duration": self.log_duration.tolist(),
            "regulated_length": self.regulated_length,
        }


def _head_outputs(encodings, head: VarianceHead):
    hidden = nm.tanh(nm.add(nm.matmul(encodings, head.w1), head.b1))
    return nm.reshape(nm.add(nm.matmul(hidden, head.w2), head.b2), (-1,))


def variance_tensors(encodings, params: SynthParams):
    """Graph-valued (pitch, energy, log_duration) vectors, one per position."""
    encodings = _require_matrix(encodings)
    return (
        _head_outputs(encodings, params.pitch),
        _head_outputs(encodings, params.energy),
        _head_outputs(encodings, params.log_duration),
    )


def regulated_length(log_durations):
    return int(np.maximum(1, np.rint(np.exp(np.asarray(log_durations)))).sum())


def predict_variance(encodings, params: SynthParams):
    """Per-phoneme prosody from aggregated encodings.

    The duration head works in the log domain; the regulated length is
    the total frame count after max(1, round(exp(.))) per position.
    """
    pitch, energy, logdur = variance_tensors(encodings, params)
    return ProsodyPrediction(
        pitch=np.asarray(pitch.data).copy(),
        energy=np.asarray(energy.data).copy(),
        log_duration=np.asarray(logdur.data).copy(),
        regulated_length=regulated_length(logdur.data),
    )


def length_regulate(encodings, durations):
    """Repeat position i of the encodings durations[i] times, order kept."""
    encodings = _require_matrix(encodings)
    durations = np.asarray(durations)
    if durations.shape != (encodings.shape[0],):
        raise ShapeError(
            f"need one duration per position: {durations.shape} vs {encodings.shape[0]} rows")
    if durations.size and durations.min() < 1:
        raise ContractError(f"durations must be >= 1, got {int(durations.min())}")
    return nm.repeat_rows(encodings, durations)


def _require_matrix(x):
    if not isinstance(x, Tensor):
        x = nm.stack_rows([nm.as_tensor(r) for r in x])
    if x.ndim != 2:
        raise ShapeError(f"expected a matrix of position rows, got shape {x.shape}")
    return x
