"""Synthetic dialogue corpus with known cross-modal latent dynamics.

Each corpus draws a fixed two-track latent system: a "semantic" latent
and a "prosodic" latent evolve per turn under contractive tanh dynamics
with cross-coupling between the tracks. Observed sentence-level features
are noisy nonlinear projections of the matching latent, so history in
one modality carries information about the other modality's future --
exactly the pathway the inter-modal interaction modules are meant to
capture. Target prosody mixes a history-determined component (the final
prosodic latent) with per-phoneme offsets that are recoverable from
phoneme identity alone.

Corpora serialize to JSON Lines (optionally gzipped when the path ends
in ".gz"); floats are written with full round-trip precision so
write/read is value-exact.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorpusError


@dataclass
class GeneratorConfig:
    num_dialogues: int = 2000
    turns_min: int = 2
    turns_max: int = 6
    d_z: int = 16
    d_t: int = 32
    d_s: int = 48
    noise_sigma: float = 0.05
    vocab: int = 64
    phonemes_min: int = 4
    phonemes_max: int = 12
    num_speakers: int = 2
    seed: int = 0
    cross_coupling: float = 1.0  # 0 severs the pathways between the two latent tracks

    def __post_init__(self):
        if self.turns_min < 2:
            raise ConfigError(f"turns_min must be >= 2, got {self.turns_min}")
        if self.turns_max < self.turns_min:
            raise ConfigError(f"turns_max {self.turns_max} < turns_min {self.turns_min}")
        for name in ("d_z", "d_t", "d_s", "vocab", "phonemes_min", "num_speakers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.phonemes_max < self.phonemes_min:
            raise ConfigError(f"phonemes_max {self.phonemes_max} < phonemes_min {self.phonemes_min}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_dialogues < 0:
            raise ConfigError(f"num_dialogues must be >= 0, got {self.num_dialogues}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class UtteranceFeatures:
    semantic: np.ndarray | None
    prosodic: np.ndarray | None
    speaker_id: int


@dataclass
class DialogueRecord:
    utterances: list[UtteranceFeatures]
    target_phonemes: np.ndarray
    target_pitch: np.ndarray
    target_energy: np.ndarray
    target_duration: np.ndarray


@dataclass
class SystemParams:
    """The fixed maps defining one corpus's latent dynamics."""

    a_ss: np.ndarray  # semantic -> semantic
    a_pp: np.ndarray  # prosodic -> prosodic
    a_ps: np.ndarray  # prosodic -> semantic (cross)
    a_sp: np.ndarray  # semantic -> prosodic (cross)
    w_text: np.ndarray    # [d_t, d_z]
    w_speech: np.ndarray  # [d_s, d_z]
    w_pitch: np.ndarray   # [d_z]
    w_energy: np.ndarray
    w_duration: np.ndarray
    pitch_offsets: np.ndarray     # [vocab]
    energy_offsets: np.ndarray
    duration_offsets: np.ndarray


def _scale_to_spectral_norm(m, target, iters=60):
    v = np.ones(m.shape[1]) / math.sqrt(m.shape[1])
    for _ in range(iters):
        v = m.T @ (m @ v)
        v /= np.linalg.norm(v)
    sigma = np.linalg.norm(m @ v)
    return m * (target / sigma)


def draw_system(config: GeneratorConfig, rng) -> SystemParams:
    d_z = config.d_z

    def dyn():
        return _scale_to_spectral_norm(rng.standard_normal((d_z, d_z)), 0.9)

    a_ss, a_pp, a_ps, a_sp = dyn(), dyn(), dyn(), dyn()
    a_ps = a_ps * config.cross_coupling
    a_sp = a_sp * config.cross_coupling
    scale = 1.0 / math.sqrt(d_z)
    # target projections sit above the observation scale so the
    # history-determined share dominates the per-phoneme offsets
    return SystemParams(
        a_ss=a_ss, a_pp=a_pp, a_ps=a_ps, a_sp=a_sp,
        w_text=scale * rng.standard_normal((config.d_t, d_z)),
        w_speech=scale * rng.standard_normal((config.d_s, d_z)),
        w_pitch=2.2 * scale * rng.standard_normal(d_z),
        w_energy=2.2 * scale * rng.standard_normal(d_z),
        w_duration=1.5 * scale * rng.standard_normal(d_z),
        pitch_offsets=0.3 * rng.standard_normal(config.vocab),
        energy_offsets=0.3 * rng.standard_normal(config.vocab),
        duration_offsets=0.4 * rng.standard_normal(config.vocab),
    )


def simulate_dialogue(system: SystemParams, config: GeneratorConfig, rng):
    """One dialogue plus the raw history-determined prosody component.

    Returns (record, pitch_core) where pitch_core = w_pitch . z_p at the
    final turn, before corpus normalization.
    """
    n = int(rng.integers(config.turns_min, config.turns_max + 1))
    length = int(rng.integers(config.phonemes_min, config.phonemes_max + 1))
    sigma = config.noise_sigma
    z_s = rng.standard_normal(config.d_z)
    z_p = rng.standard_normal(config.d_z)
    utterances = []
    for i in range(n):
        semantic = np.tanh(system.w_text @ z_s) + sigma * rng.standard_normal(config.d_t)
        prosodic = np.tanh(system.w_speech @ z_p) + sigma * rng.standard_normal(config.d_s)
        utterances.append(UtteranceFeatures(semantic=semantic, prosodic=prosodic,
                                            speaker_id=i % config.num_speakers))
        if i < n - 1:
            z_s, z_p = (
                np.tanh(system.a_ss @ z_s + system.a_ps @ z_p) + sigma * rng.standard_normal(config.d_z),
                np.tanh(system.a_pp @ z_p + system.a_sp @ z_s) + sigma * rng.standard_normal(config.d_z),
            )
    phonemes = rng.integers(0, config.vocab, size=length)
    pitch_core = float(system.w_pitch @ z_p)
    energy_core = float(system.w_energy @ z_p)
    duration_core = float(system.w_duration @ z_p)
    pitch = pitch_core + system.pitch_offsets[phonemes]
    energy = energy_core + system.energy_offsets[phonemes]
    duration = np.clip(
        np.rint(4.0 + 2.0 * duration_core + system.duration_offsets[phonemes]), 1, 8
    ).astype(np.int64)
    record = DialogueRecord(
        utterances=utterances,
        target_phonemes=phonemes.astype(np.int64),
        target_pitch=pitch,
        target_energy=energy,
        target_duration=duration,
    )
    return record, pitch_core


def _system_rng(config):
    return np.random.default_rng([config.seed, 0x5EED])


def _dialogue_rng(config, index):
    return np.random.default_rng(config.seed ^ index)


def generate_corpus(config: GeneratorConfig):
    """Deterministic corpus: a pure function of the config (incl. seed).

    Dialogue i draws from its own generator seeded with seed XOR i, so
    generation order (or parallel generation) cannot change the output.
    Pitch and energy targets are z-normalized by pooled corpus statistics
    after generation.
    """
    system = draw_system(config, _system_rng(config))
    records = [
        simulate_dialogue(system, config, _dialogue_rng(config, i))[0]
        for i in range(config.num_dialogues)
    ]
    normalize_prosody_targets(records)
    return records


def normalize_prosody_targets(records):
    """In-place z-normalization of pitch/energy by pooled corpus stats."""
    if not records:
        return {"pitch_mean": 0.0, "pitch_std": 1.0, "energy_mean": 0.0, "energy_std": 1.0}
    pitch = np.concatenate([r.target_pitch for r in records])
    energy = np.concatenate([r.target_energy for r in records])
    stats = {
        "pitch_mean": float(pitch.mean()),
        "pitch_std": max(float(pitch.std()), 1e-12),
        "energy_mean": float(energy.mean()),
        "energy_std": max(float(energy.std()), 1e-12),
    }
    for r in records:
        r.target_pitch = (r.target_pitch - stats["pitch_mean"]) / stats["pitch_std"]
        r.target_energy = (r.target_energy - stats["energy_mean"]) / stats["energy_std"]
    return stats


def self_test(config: GeneratorConfig):
    """Learnability gate: a linear probe from mean history prosodic
    features must explain a nontrivial share of the history-determined
    pitch component. Returns the probe R^2 and target statistics.
    """
    system = draw_system(config, _system_rng(config))
    xs, ys = [], []
    pitches = []
    for i in range(config.num_dialogues):
        record, pitch_core = simulate_dialogue(system, config, _dialogue_rng(config, i))
        history = record.utterances[:-1]
        xs.append(np.mean([u.prosodic for u in history], axis=0))
        ys.append(pitch_core)
        pitches.append(record.target_pitch)
    x = np.column_stack([np.stack(xs), np.ones(len(xs))])
    y = np.asarray(ys)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    residual = y - x @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((residual ** 2).sum()) / max(ss_tot, 1e-12)
    pooled = np.concatenate(pitches)
    return {
        "probe_r2": r2,
        "raw_pitch_mean": float(pooled.mean()),
        "raw_pitch_std": float(pooled.std()),
        "num_dialogues": config.num_dialogues,
    }


# ---------------------------------------------------------------------------
# serialization


def _open_for(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def record_to_dict(record: DialogueRecord):
    return {
        "utterances": [
            {
                "speaker": int(u.speaker_id),
                "semantic": np.asarray(u.semantic, dtype=np.float64).tolist(),
                "prosodic": np.asarray(u.prosodic, dtype=np.float64).tolist(),
            }
            for u in record.utterances
        ],
        "target": {
            "phonemes": np.asarray(record.target_phonemes).tolist(),
            "pitch": np.asarray(record.target_pitch, dtype=np.float64).tolist(),
            "energy": np.asarray(record.target_energy, dtype=np.float64).tolist(),
            "duration": np.asarray(record.target_duration).tolist(),
        },
    }


def write_corpus(records, path):
    with _open_for(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record)) + "\n")


def _require(condition, message, line):
    if not condition:
        raise CorpusError(message, line=line)


def _float_vector(value, name, line, min_len=1):
    _require(isinstance(value, list) and len(value) >= min_len,
             f"field {name!r} must be a nonempty list", line)
    arr = np.asarray(value, dtype=np.float64)
    _require(arr.ndim == 1, f"field {name!r} must be flat", line)
    _require(np.isfinite(arr).all(), f"field {name!r} contains non-finite values", line)
    return arr


def record_from_dict(obj, line=None, require_targets=True):
    _require(isinstance(obj, dict), "each line must be a JSON object", line)
    utterances_raw = obj.get("utterances")
    _require(isinstance(utterances_raw, list) and utterances_raw,
             "field 'utterances' must be a nonempty list", line)
    if require_targets:
        _require(len(utterances_raw) >= 2, "a dialogue needs at least 2 utterances", line)
    utterances = []
    for i, u in enumerate(utterances_raw):
        _require(isinstance(u, dict), f"utterance {i} must be an object", line)
        speaker = u.get("speaker")
        _require(isinstance(speaker, int) and speaker >= 0,
                 f"utterance {i}: field 'speaker' must be a nonnegative integer", line)
        if i > 0:
            _require(speaker != utterances[-1].speaker_id,
                     f"utterance {i}: speakers must alternate", line)
        utterances.append(UtteranceFeatures(
            semantic=_float_vector(u.get("semantic"), f"utterances[{i}].semantic", line),
            prosodic=_float_vector(u.get("prosodic"), f"utterances[{i}].prosodic", line),
            speaker_id=speaker,
        ))
    target = obj.get("target")
    _require(isinstance(target, dict), "field 'target' must be an object", line)
    phonemes_raw = target.get("phonemes")
    if require_targets:
        _require(isinstance(phonemes_raw, list) and phonemes_raw,
                 "field 'target.phonemes' must be a nonempty list", line)
    else:
        phonemes_raw = phonemes_raw or []
        _require(isinstance(phonemes_raw, list), "field 'target.phonemes' must be a list", line)
    _require(all(isinstance(p, int) and p >= 0 for p in phonemes_raw),
             "field 'target.phonemes' must hold nonnegative integers", line)
    phonemes = np.asarray(phonemes_raw, dtype=np.int64)
    if not require_targets and not all(k in target for k in ("pitch", "energy", "duration")):
        return DialogueRecord(
            utterances=utterances,
            target_phonemes=phonemes,
            target_pitch=np.zeros(0),
            target_energy=np.zeros(0),
            target_duration=np.zeros(0, dtype=np.int64),
        )
    pitch = _float_vector(target.get("pitch"), "target.pitch", line)
    energy = _float_vector(target.get("energy"), "target.energy", line)
    duration_raw = target.get("duration")
    _require(isinstance(duration_raw, list) and duration_raw,
             "field 'target.duration' must be a nonempty list", line)
    _require(all(isinstance(d, int) for d in duration_raw),
             "field 'target.duration' must hold integers", line)
    duration = np.asarray(duration_raw, dtype=np.int64)
    _require(duration.min() >= 1 and duration.max() <= 8,
             "field 'target.duration' must lie in [1, 8]", line)
    n = len(phonemes)
    _require(len(pitch) == n and len(energy) == n and len(duration) == n,
             "target arrays must share the phoneme count", line)
    return DialogueRecord(
        utterances=utterances,
        target_phonemes=phonemes,
        target_pitch=pitch,
        target_energy=energy,
        target_duration=duration,
    )


def read_corpus(path):
    """Parse and validate a JSON Lines corpus; an empty file is an empty corpus."""
    records = []
    with _open_for(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            records.append(record_from_dict(obj, line=line_no))
    return records


def ingest_external(path):
    """Read a corpus produced elsewhere, enforcing dimension consistency.

    Feature widths may differ from the generator defaults but must agree
    across every utterance in the file.
    """
    records = read_corpus(path)
    dims = None
    for i, record in enumerate(records, start=1):
        for u in record.utterances:
            pair = (len(u.semantic), len(u.prosodic))
            if dims is None:
                dims = pair
            elif pair != dims:
                raise CorpusError(
                    f"inconsistent feature dims: saw semantic/prosodic {dims} earlier, "
                    f"{pair} in record {i}")
    return records


def dialogues_equal(a: DialogueRecord, b: DialogueRecord):
    if len(a.utterances) != len(b.utterances):
        return False
    for ua, ub in zip(a.utterances, b.utterances):
        if ua.speaker_id != ub.speaker_id:
            return False
        if not np.array_equal(ua.semantic, ub.semantic):
            return False
        if not np.array_equal(ua.prosodic, ub.prosodic):
            return False
    return (
        np.array_equal(a.target_phonemes, b.target_phonemes)
        and np.array_equal(a.target_pitch, b.target_pitch)
        and np.array_equal(a.target_energy, b.target_energy)
        and np.array_equal(a.target_duration, b.target_duration)
    )
