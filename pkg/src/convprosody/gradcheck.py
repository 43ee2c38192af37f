"""Gradient-check suites comparing every differentiable operation against
central finite differences.

Each suite builds small random instances in float64, wraps them in a
scalar-valued closure, and sweeps the relevant parameter tensors with
``numerics.grad_check``. "small" dims keep the sweep exhaustive and
fast; "default" dims use the desk-scale model sizes and probe a random
subset of coordinates per tensor so the run stays interactive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import GeneratorConfig, generate_corpus
from .encoders import gru_cell, encode_sequence, init_encoder_params, init_gru_direction
from .errors import ContractError
from .interaction import (
    KINDS,
    AlignmentMatrices,
    build_prediction_matrix,
    contrastive_loss,
    cross_attention,
    ground_truth_matrix,
    init_ie_params,
    interaction_enhance,
    run_interaction_module,
)
from .model import Model, ModelConfig
from .numerics import Tensor, grad_check
from .synthesizer import encode_phonemes, init_synth_params, variance_tensors

TOLERANCE = 1e-4
MODULE_NAMES = ("numerics", "encoders", "interaction", "synthesizer")


@dataclass
class OpReport:
    module: str
    op: str
    max_rel_error: float
    worst_coord: int = -1

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE


def _scalarize(out, rng):
    probe = Tensor(rng.normal(size=out.shape))
    return nm.tsum(nm.mul(out, probe))


def _sweep(module, op, f, tensors, eps, max_coords, rng, reports):
    worst = 0.0
    worst_coord = -1
    for tensor in tensors:
        details = {}
        err = grad_check(f, tensor, eps=eps, max_coords=max_coords, rng=rng, details=details)
        if err > worst:
            worst = err
            worst_coord = details.get("coord", -1)
    reports.append(OpReport(module=module, op=op, max_rel_error=worst, worst_coord=worst_coord))


def suite_numerics(dims, rng, reports):
    n = 3 if dims == "small" else 8
    eps = 1e-6
    for trial in range(3):
        a = Tensor(rng.normal(size=(n, n)), requires_grad=True)
        b = Tensor(rng.normal(size=(n, n)))
        _sweep("numerics", "matmul", lambda p: _scalarize(nm.matmul(p, b), np.random.default_rng(trial)),
               [a], eps, None, rng, reports)
        v = Tensor(rng.normal(size=n), requires_grad=True)
        _sweep("numerics", "softmax", lambda p: _scalarize(nm.softmax(p), np.random.default_rng(trial)),
               [v], eps, None, rng, reports)
        u = Tensor(rng.normal(size=n), requires_grad=True)
        w = Tensor(rng.normal(size=n), requires_grad=True)
        _sweep("numerics", "cosine_similarity", lambda p: nm.cosine_similarity(u, w),
               [u, w], eps, None, rng, reports)
        x = Tensor(rng.normal(size=(n, n)), requires_grad=True)
        y = Tensor(rng.normal(size=(n, n)))
        _sweep("numerics", "mse", lambda p: nm.mse(x, y), [x], eps, None, rng, reports)
        z = Tensor(rng.normal(size=n), requires_grad=True)
        _sweep("numerics", "layer_norm", lambda p: _scalarize(nm.layer_norm(p), np.random.default_rng(trial)),
               [z], eps, None, rng, reports)
        comp = Tensor(rng.normal(size=(n, n)), requires_grad=True)
        cprobe = Tensor(rng.normal(size=(n, n)))

        def composite(p, cprobe=cprobe, b=b):
            h = nm.tanh(nm.matmul(p, b))
            return nm.add(nm.mse(h, cprobe), nm.mean(nm.sigmoid(p)))

        _sweep("numerics", "composite_chain", composite, [comp], eps, None, rng, reports)


def suite_encoders(dims, rng, reports):
    if dims == "small":
        d_in, d_h, d_m, max_coords = 3, 3, 2, None
    else:
        d_in, d_h, d_m, max_coords = 32, 32, 16, 12
    eps = 1e-6
    direction = init_gru_direction(d_in, d_h, rng, np.float64)
    x0 = rng.normal(size=d_in)
    h0 = rng.normal(size=d_h)
    probe = Tensor(rng.normal(size=d_h))
    _sweep("encoders", "gru_cell",
           lambda p: nm.dot(gru_cell(Tensor(x0), Tensor(h0), direction), probe),
           list(direction.tensors().values()), eps, max_coords, rng, reports)

    params = init_encoder_params(2, d_in, d_h, d_m, rng, np.float64)
    feats = [rng.normal(size=d_in) for _ in range(3)]
    ids = [0, 1, 0]
    eprobe = Tensor(rng.normal(size=(3, d_m)))
    for contextual, label in ((True, "bigru_encoder"), (False, "next_encoder")):
        _sweep("encoders", label,
               lambda p, c=contextual: nm.tsum(nm.mul(encode_sequence(feats, ids, params, contextual=c), eprobe)),
               list(params.tensors().values()), eps, max_coords, rng, reports)


def suite_interaction(dims, rng, reports):
    if dims == "small":
        d_m, max_coords = 4, None
        config = ModelConfig(d_t=3, d_s=4, d_h_text=3, d_h_speech=4, d_m=4,
                             vocab=6, precision="f64", seed=5)
        gen = GeneratorConfig(num_dialogues=1, d_z=3, d_t=3, d_s=4, vocab=6,
                              phonemes_min=2, phonemes_max=3, seed=6,
                              turns_min=3, turns_max=3)
    else:
        d_m, max_coords = 16, 12
        config = ModelConfig(precision="f64", seed=5)
        gen = GeneratorConfig(num_dialogues=1, seed=6, turns_min=4, turns_max=4)
    eps = 1e-6
    ie = init_ie_params(d_m, rng)
    q = rng.normal(size=d_m)
    ctx = Tensor(rng.normal(size=(3, d_m)))
    aprobe = Tensor(rng.normal(size=d_m))
    _sweep("interaction", "cross_attention",
           lambda p: nm.dot(cross_attention(Tensor(q), ctx, ie), aprobe),
           list(ie.tensors().values()), eps, max_coords, rng, reports)

    hist = Tensor(rng.normal(size=(4, d_m)), requires_grad=True)
    fprobe = Tensor(rng.normal(size=(4, d_m)))
    _sweep("interaction", "interaction_enhance",
           lambda p: nm.tsum(nm.mul(interaction_enhance(hist, ie, True), fprobe)),
           [hist] + list(ie.tensors().values()), eps, max_coords, rng, reports)

    f = Tensor(rng.normal(size=(3, d_m)), requires_grad=True)
    h = Tensor(rng.normal(size=(3, d_m)), requires_grad=True)

    def alignment(p):
        m_p = build_prediction_matrix(f, h)
        return contrastive_loss(AlignmentMatrices(m_p, ground_truth_matrix(3)))

    _sweep("interaction", "contrastive_loss", alignment, [f, h], eps, max_coords, rng, reports)

    model = Model.init(config)
    record = generate_corpus(gen)[0]
    # the full module loss spreads O(1) output over tens of thousands of
    # coordinates; per-coordinate derivatives near 1e-8 need a larger
    # probe step or central differences drown in roundoff
    loss_eps = eps if dims == "small" else 5e-4
    for kind in KINDS:
        tensors = list(model.ie[kind].tensors().values())
        tensors.append(model.encoder_for("text").proj1_w)
        tensors.append(model.encoder_for("speech").fwd.w_h)
        _sweep("interaction", f"module_loss_{kind}",
               lambda p, k=kind: run_interaction_module(k, record, model).loss,
               tensors, loss_eps, max_coords, rng, reports)


def suite_synthesizer(dims, rng, reports):
    if dims == "small":
        vocab, d_m, max_coords = 5, 4, None
    else:
        vocab, d_m, max_coords = 64, 16, 12
    eps = 1e-6
    params = init_synth_params(vocab, d_m, rng)
    for head in (params.pitch, params.energy, params.log_duration):
        head.w2.data[:] = rng.normal(size=head.w2.shape)
    ids = [0, 1, 2]
    pprobe = Tensor(rng.normal(size=(3, d_m)))
    _sweep("synthesizer", "phoneme_encoder",
           lambda p: nm.tsum(nm.mul(encode_phonemes(ids, params), pprobe)),
           [params.phoneme_table, params.out_w, params.fwd.u_z, params.bwd.w_h],
           eps, max_coords, rng, reports)

    enc = Tensor(rng.normal(size=(3, d_m)), requires_grad=True)
    vprobe = Tensor(rng.normal(size=3))

    def heads(p):
        pitch, energy, logdur = variance_tensors(enc, params)
        return nm.add(nm.dot(pitch, vprobe), nm.add(nm.dot(energy, vprobe), nm.dot(logdur, vprobe)))

    tensors = [enc]
    for head in (params.pitch, params.energy, params.log_duration):
        tensors += list(head.tensors().values())
    _sweep("synthesizer", "variance_heads", heads, tensors, eps, max_coords, rng, reports)


_SUITES = {
    "numerics": suite_numerics,
    "encoders": suite_encoders,
    "interaction": suite_interaction,
    "synthesizer": suite_synthesizer,
}


def run_suites(module="all", dims="small", seed=0):
    """Run the requested suites in float64; returns a list of OpReport."""
    if module != "all" and module not in _SUITES:
        raise ContractError(
            f"unknown gradcheck module {module!r}; expected 'all' or one of {MODULE_NAMES}")
    if dims not in ("small", "default"):
        raise ContractError(f"dims must be 'small' or 'default', got {dims!r}")
    names = MODULE_NAMES if module == "all" else (module,)
    reports: list[OpReport] = []
    with nm.precision("f64"):
        for name in names:
            _SUITES[name](dims, np.random.default_rng(seed), reports)
    return reports
