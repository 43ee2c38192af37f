"""Joint training, evaluation, and inference.

Training optimizes the three variance losses (pitch, energy,
log-duration MSE) plus the weighted sum of the enabled modules'
alignment losses, with Adam over whole-dialogue batches. Evaluation
reports pitch/energy MAE in normalized units, duration MAE in the log
domain, and per-module retrieval accuracy on held-out dialogues. The
inference path conditions only on dialogue history: next-utterance
features are touched exclusively by the alignment losses and retrieval
scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoders import encode_sequence
from .errors import ConfigError, ContractError, NumericError
from .interaction import (
    KIND_MODALITIES,
    AlignmentMatrices,
    _modality_features,
    build_prediction_matrix,
    contrastive_loss,
    ground_truth_matrix,
    interaction_enhance,
)
from .model import Model, ModelConfig
from .numerics import Adam, Tensor, backward
from .synthesizer import (
    InteractionFeatureSet,
    ProsodyPrediction,
    aggregate_features,
    encode_phonemes,
    regulated_length,
    variance_tensors,
)


@dataclass
class EvalReport:
    mae_p: float
    mae_e: float
    mae_d: float
    retrieval_acc: dict[str, float]
    retrieval_chance: float
    loss_components: dict[str, float]

    @property
    def total_loss(self):
        return self.loss_components.get("total", math.nan)

    def to_dict(self):
        return {
            "mae_p": self.mae_p,
            "mae_e": self.mae_e,
            "mae_d": self.mae_d,
            "retrieval_acc": dict(self.retrieval_acc),
            "retrieval_chance": self.retrieval_chance,
            "loss_components": dict(self.loss_components),
        }


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int
    stats: dict[str, float]


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    metrics: list[dict]


# ---------------------------------------------------------------------------
# forward helpers


def _encode_sides(record, model, hist_mods, next_mods):
    utterances = record.utterances
    if len(utterances) < 2:
        raise ContractError(f"dialogue must have at least 2 utterances, got {len(utterances)}")
    hist, nxt = {}, {}
    for mod in hist_mods:
        hist[mod] = encode_sequence(
            _modality_features(utterances[:-1], mod, model.dtype),
            [u.speaker_id for u in utterances[:-1]],
            model.encoder_for(mod),
            contextual=True,
        )
    for mod in next_mods:
        nxt[mod] = encode_sequence(
            _modality_features(utterances[1:], mod, model.dtype),
            [u.speaker_id for u in utterances[1:]],
            model.encoder_for(mod),
            contextual=False,
        )
    return hist, nxt


def _interaction_features(record, model, with_next):
    """Per-kind prefix features, sharing one encoder pass per modality."""
    kinds = model.config.module_flags.enabled_kinds()
    hist_mods = {KIND_MODALITIES[k][0] for k in kinds}
    next_mods = {KIND_MODALITIES[k][1] for k in kinds} if with_next else set()
    hist, nxt = _encode_sides(record, model, hist_mods, next_mods)
    feats = {}
    for kind in kinds:
        feats[kind] = interaction_enhance(
            hist[KIND_MODALITIES[kind][0]], model.ie[kind], model.config.ie_enabled)
    return feats, nxt


def _prosody_tensors(record, feats_by_kind, model):
    encodings = encode_phonemes(record.target_phonemes.tolist(), model.synth)
    aggregated = aggregate_features(encodings, InteractionFeatureSet.from_kinds(feats_by_kind))
    return variance_tensors(aggregated, model.synth)


def _target_tensors(record, dtype):
    return (
        Tensor(np.asarray(record.target_pitch, dtype=dtype)),
        Tensor(np.asarray(record.target_energy, dtype=dtype)),
        Tensor(np.log(record.target_duration).astype(dtype)),
    )


def _mean_scalars(scalars):
    total = scalars[0]
    for s in scalars[1:]:
        total = nm.add(total, s)
    return nm.mul(total, 1.0 / len(scalars))


def total_loss(batch, model):
    """Batch loss and its components.

    L = mean pitch MSE + mean energy MSE + mean log-duration MSE
        + lambda_cl * sum over enabled modules of the mean alignment loss.

    Disabled modules contribute neither loss terms nor aggregation
    vectors; with lambda_cl == 0 the alignment losses are skipped
    entirely, so no gradient reaches parameters used only by them.
    """
    batch = list(batch)
    if not batch:
        raise ContractError("total_loss requires a nonempty batch")
    config = model.config
    kinds = config.module_flags.enabled_kinds()
    with_cl = config.lambda_cl > 0
    pitch_losses, energy_losses, duration_losses = [], [], []
    cl_losses = {kind: [] for kind in kinds} if with_cl else {}
    for record in batch:
        feats, nxt = _interaction_features(record, model, with_next=with_cl)
        if with_cl:
            for kind in kinds:
                m_p = build_prediction_matrix(feats[kind], nxt[KIND_MODALITIES[kind][1]])
                m_gt = ground_truth_matrix(m_p.shape[0], dtype=m_p.dtype)
                cl_losses[kind].append(contrastive_loss(AlignmentMatrices(m_p, m_gt)))
        pitch, energy, logdur = _prosody_tensors(record, feats, model)
        t_pitch, t_energy, t_logdur = _target_tensors(record, model.dtype)
        pitch_losses.append(nm.mse(pitch, t_pitch))
        energy_losses.append(nm.mse(energy, t_energy))
        duration_losses.append(nm.mse(logdur, t_logdur))
    parts = {
        "pitch": _mean_scalars(pitch_losses),
        "energy": _mean_scalars(energy_losses),
        "log_duration": _mean_scalars(duration_losses),
    }
    total = nm.add(nm.add(parts["pitch"], parts["energy"]), parts["log_duration"])
    components = {name: part.item() for name, part in parts.items()}
    for kind in kinds:
        if with_cl:
            part = _mean_scalars(cl_losses[kind])
            components[f"cl_{kind}"] = part.item()
            total = nm.add(total, nm.mul(part, config.lambda_cl))
        else:
            components[f"cl_{kind}"] = 0.0
    components["total"] = total.item()
    return total, components


# ---------------------------------------------------------------------------
# retrieval


def _retrieval_counts(features, next_encodings):
    f = features.data if isinstance(features, Tensor) else np.stack([np.asarray(v) for v in features])
    h = next_encodings.data if isinstance(next_encodings, Tensor) else np.stack(
        [np.asarray(v) for v in next_encodings])
    if f.shape[0] != h.shape[0]:
        raise ContractError(f"{f.shape[0]} prefix features but {h.shape[0]} next encodings")
    fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), nm.COSINE_EPS)
    hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), nm.COSINE_EPS)
    sims = fn @ hn.T
    correct = 0
    for i in range(sims.shape[0]):
        row = sims[i]
        # ties break toward the lowest index
        winner = int(np.flatnonzero(row == row.max())[0])
        if winner == i:
            correct += 1
    return correct, sims.shape[0]


def retrieval_accuracy(features, next_encodings):
    """Fraction of prefixes whose nearest next encoding (by cosine) is the
    true successor; ties count as correct only when the true index is the
    lowest maximizer."""
    correct, total = _retrieval_counts(features, next_encodings)
    return correct / total


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, records, with_retrieval=True, with_loss=True):
    """Held-out metrics for a dialogue split.

    The prosody path conditions on history only; next-utterance features
    are read just for retrieval accuracy and the alignment loss
    components, and not at all when those are disabled.
    """
    records = list(records)
    if not records:
        raise ContractError("evaluate requires a nonempty split")
    config = model.config
    kinds = config.module_flags.enabled_kinds()
    abs_p, abs_e, abs_d = [], [], []
    counts = {kind: [0, 0] for kind in kinds}
    comp_sums: dict[str, float] = {}
    total_queries = 0
    with nm.no_grad():
        for record in records:
            feats, nxt = _interaction_features(
                record, model, with_next=with_retrieval or with_loss)
            pitch, energy, logdur = _prosody_tensors(record, feats, model)
            abs_p.append(np.abs(pitch.data - record.target_pitch))
            abs_e.append(np.abs(energy.data - record.target_energy))
            abs_d.append(np.abs(logdur.data - np.log(record.target_duration)))
            total_queries += len(record.utterances) - 1
            if with_retrieval:
                for kind in kinds:
                    good, tot = _retrieval_counts(feats[kind], nxt[KIND_MODALITIES[kind][1]])
                    counts[kind][0] += good
                    counts[kind][1] += tot
            if with_loss:
                t_pitch, t_energy, t_logdur = _target_tensors(record, model.dtype)
                comp_sums["pitch"] = comp_sums.get("pitch", 0.0) + nm.mse(pitch, t_pitch).item()
                comp_sums["energy"] = comp_sums.get("energy", 0.0) + nm.mse(energy, t_energy).item()
                comp_sums["log_duration"] = (
                    comp_sums.get("log_duration", 0.0) + nm.mse(logdur, t_logdur).item())
                for kind in kinds:
                    m_p = build_prediction_matrix(feats[kind], nxt[KIND_MODALITIES[kind][1]])
                    m_gt = ground_truth_matrix(m_p.shape[0], dtype=m_p.dtype)
                    loss = contrastive_loss(AlignmentMatrices(m_p, m_gt)).item()
                    comp_sums[f"cl_{kind}"] = comp_sums.get(f"cl_{kind}", 0.0) + loss
    components = {name: value / len(records) for name, value in comp_sums.items()}
    if with_loss:
        components["total"] = (
            components["pitch"] + components["energy"] + components["log_duration"]
            + config.lambda_cl * sum(components.get(f"cl_{k}", 0.0) for k in kinds)
        )
    # each query in a dialogue with n candidates has chance 1/n, so a
    # dialogue contributes exactly 1 expected hit: pooled chance = D / queries
    return EvalReport(
        mae_p=float(np.concatenate(abs_p).mean()),
        mae_e=float(np.concatenate(abs_e).mean()),
        mae_d=float(np.concatenate(abs_d).mean()),
        retrieval_acc={k: c[0] / c[1] for k, c in counts.items()} if with_retrieval else {},
        retrieval_chance=len(records) / total_queries,
        loss_components=components,
    )


# ---------------------------------------------------------------------------
# inference


def infer(history, target_phonemes, model):
    """Prosody for a target utterance from its dialogue history alone."""
    history = list(history)
    if not history:
        raise ContractError("infer requires at least one history utterance")
    phonemes = [int(p) for p in target_phonemes]
    if not phonemes:
        raise ContractError("infer requires a nonempty phoneme sequence")
    config = model.config
    kinds = config.module_flags.enabled_kinds()
    hist_mods = {KIND_MODALITIES[k][0] for k in kinds}
    with nm.no_grad():
        hist = {}
        for mod in hist_mods:
            hist[mod] = encode_sequence(
                _modality_features(history, mod, model.dtype),
                [u.speaker_id for u in history],
                model.encoder_for(mod),
                contextual=True,
            )
        feats = {
            kind: interaction_enhance(
                hist[KIND_MODALITIES[kind][0]], model.ie[kind], config.ie_enabled)
            for kind in kinds
        }
        encodings = encode_phonemes(phonemes, model.synth)
        aggregated = aggregate_features(encodings, InteractionFeatureSet.from_kinds(feats))
        pitch, energy, logdur = variance_tensors(aggregated, model.synth)
    return ProsodyPrediction(
        pitch=np.asarray(pitch.data, dtype=np.float64).copy(),
        energy=np.asarray(energy.data, dtype=np.float64).copy(),
        log_duration=np.asarray(logdur.data, dtype=np.float64).copy(),
        regulated_length=regulated_length(logdur.data),
    )


# ---------------------------------------------------------------------------
# training


def split_corpus(records, seed):
    """Deterministic 8:1:1 split after a seeded shuffle of dialogue indices."""
    records = list(records)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    order = rng.permutation(len(records))
    n_train = int(0.8 * len(records))
    n_val = int(0.1 * len(records))
    train_idx = order[:n_train]
    val_idx = order[n_train:n_train + n_val]
    test_idx = order[n_train + n_val:]
    pick = lambda idx: [records[i] for i in idx]
    return pick(train_idx), pick(val_idx), pick(test_idx)


def validate_corpus_dims(records, config: ModelConfig):
    for i, record in enumerate(records):
        for u in record.utterances:
            if len(u.semantic) != config.d_t:
                raise ConfigError(
                    f"dialogue {i}: semantic dim {len(u.semantic)} does not match d_t={config.d_t}")
            if len(u.prosodic) != config.d_s:
                raise ConfigError(
                    f"dialogue {i}: prosodic dim {len(u.prosodic)} does not match d_s={config.d_s}")
            if u.speaker_id >= config.num_speakers:
                raise ConfigError(
                    f"dialogue {i}: speaker id {u.speaker_id} >= num_speakers={config.num_speakers}")
        if record.target_phonemes.size and record.target_phonemes.max() >= config.vocab:
            raise ConfigError(
                f"dialogue {i}: phoneme id {int(record.target_phonemes.max())} >= vocab={config.vocab}")


def _prosody_stats(records):
    pitch = np.concatenate([r.target_pitch for r in records]) if records else np.zeros(1)
    energy = np.concatenate([r.target_energy for r in records]) if records else np.zeros(1)
    return {
        "pitch_mean": float(pitch.mean()),
        "pitch_std": float(pitch.std()),
        "energy_mean": float(energy.mean()),
        "energy_std": float(energy.std()),
    }


def _snapshot(model, step, stats):
    return Checkpoint(
        config=model.config,
        tensors={name: t.data.copy() for name, t in model.named_tensors().items()},
        step=step,
        stats=dict(stats),
    )


def _first_non_finite(model, components):
    for name, value in components.items():
        if not math.isfinite(value):
            return f"loss component {name!r}"
    for name, tensor in model.named_tensors().items():
        if not np.isfinite(tensor.data).all():
            return f"tensor {name!r}"
    return "loss"


def _metrics_entry(step, train_loss, report: EvalReport):
    return {
        "step": step,
        "loss": train_loss if train_loss is None or math.isfinite(train_loss) else None,
        "val_total": report.total_loss,
        "mae_p": report.mae_p,
        "mae_e": report.mae_e,
        "mae_d": report.mae_d,
        "retrieval_acc": dict(report.retrieval_acc),
    }


def train(config: ModelConfig, records):
    """Train a model on a corpus; returns final/best checkpoints and the metrics log.

    Deterministic: the split, initialization, and batch order all derive
    from config.seed, so identical (config, corpus) pairs produce
    identical logs.
    """
    records = list(records)
    validate_corpus_dims(records, config)
    with nm.precision(config.precision):
        train_split, val_split, _ = split_corpus(records, config.seed)
        if not train_split or not val_split:
            raise ConfigError(
                f"corpus too small for an 8:1:1 split, got {len(records)} dialogues")
        stats = _prosody_stats(train_split)
        model = Model.init(config)
        optimizer = Adam(model.trainable_tensors(), lr=config.lr, beta1=0.9, beta2=0.98, eps=1e-9)
        batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
        metrics = []
        report = evaluate(model, val_split)
        metrics.append(_metrics_entry(0, None, report))
        best_total = report.total_loss
        best = _snapshot(model, 0, stats)
        order = []
        cursor = 0
        for step in range(1, config.steps + 1):
            batch = []
            while len(batch) < config.batch_size:
                if cursor >= len(order):
                    order = batch_rng.permutation(len(train_split))
                    cursor = 0
                batch.append(train_split[order[cursor]])
                cursor += 1
            loss, components = total_loss(batch, model)
            if not math.isfinite(components["total"]):
                raise NumericError(
                    f"non-finite loss at step {step}; first non-finite: "
                    f"{_first_non_finite(model, components)}")
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            if step % config.eval_every == 0 or step == config.steps:
                report = evaluate(model, val_split)
                metrics.append(_metrics_entry(step, components["total"], report))
                if report.total_loss < best_total:
                    best_total = report.total_loss
                    best = _snapshot(model, step, stats)
        final = _snapshot(model, config.steps, stats)
        if config.steps == 0:
            best = final
    return TrainResult(final=final, best=best, metrics=metrics)
