"""Model configuration and the full parameter container."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .encoders import EncoderParams, init_encoder_params
from .errors import ConfigError
from .interaction import KIND_MODALITIES, KINDS, IEParams, init_ie_params
from .numerics import Tensor
from .synthesizer import SynthParams, init_synth_params


@dataclass
class ModuleFlags:
    ht_nt: bool = True
    hs_ns: bool = True
    ht_ns: bool = True
    hs_nt: bool = True

    def enabled_kinds(self):
        return tuple(k for k in KINDS if getattr(self, k))

    @classmethod
    def none(cls):
        return cls(ht_nt=False, hs_ns=False, ht_ns=False, hs_nt=False)

    @classmethod
    def from_kept(cls, kept):
        """Flags from the list of module names to keep."""
        kept = list(kept)
        bad = [k for k in kept if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown module name(s) {bad}; valid names: {list(KINDS)}")
        return cls(**{k: k in kept for k in KINDS})

    def to_dict(self):
        return {k: getattr(self, k) for k in KINDS}


@dataclass
class ModelConfig:
    """Dimensions, loss weighting, and training hyperparameters.

    Constructor defaults are the desk-scale dimensions; ``full_scale``
    gives the published 512/768-channel configuration.
    """

    d_t: int = 32
    d_s: int = 48
    d_h_text: int = 32
    d_h_speech: int = 48
    d_m: int = 16
    vocab: int = 64
    num_speakers: int = 2
    lambda_cl: float = 1.0
    module_flags: ModuleFlags = field(default_factory=ModuleFlags)
    ie_enabled: bool = True
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 3000
    seed: int = 0
    precision: str = "f32"
    eval_every: int = 500

    def __post_init__(self):
        if isinstance(self.module_flags, dict):
            self.module_flags = ModuleFlags(**self.module_flags)
        for name in ("d_t", "d_s", "d_h_text", "d_h_speech", "d_m", "vocab", "num_speakers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_m % 2:
            raise ConfigError(f"d_m must be even, got {self.d_m}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lambda_cl < 0:
            raise ConfigError(f"lambda_cl must be >= 0, got {self.lambda_cl}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(d_t=512, d_s=768, d_h_text=512, d_h_speech=768, d_m=256)
        base.update(overrides)
        return cls(**base)

    @property
    def dtype(self):
        return np.dtype(np.float32 if self.precision == "f32" else np.float64)

    def with_flags(self, flags: ModuleFlags, **overrides):
        return replace(self, module_flags=flags, **overrides)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["module_flags"] = self.module_flags.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Model:
    """All trainable parameters: two shared encoders (text, speech), one
    projection set per interaction module, and the synthesizer."""

    def __init__(self, config: ModelConfig, text_encoder: EncoderParams,
                 speech_encoder: EncoderParams, ie: dict[str, IEParams], synth: SynthParams):
        self.config = config
        self.text_encoder = text_encoder
        self.speech_encoder = speech_encoder
        self.ie = ie
        self.synth = synth

    @classmethod
    def init(cls, config: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        dtype = config.dtype
        return cls(
            config=config,
            text_encoder=init_encoder_params(
                config.num_speakers, config.d_t, config.d_h_text, config.d_m, rng, dtype),
            speech_encoder=init_encoder_params(
                config.num_speakers, config.d_s, config.d_h_speech, config.d_m, rng, dtype),
            ie={k: init_ie_params(config.d_m, rng, dtype) for k in KINDS},
            synth=init_synth_params(config.vocab, config.d_m, rng, dtype),
        )

    @property
    def dtype(self):
        return self.config.dtype

    def encoder_for(self, modality):
        return self.text_encoder if modality == "text" else self.speech_encoder

    def named_tensors(self):
        out = {}
        for name, tensor in self.text_encoder.tensors().items():
            out[f"text_encoder.{name}"] = tensor
        for name, tensor in self.speech_encoder.tensors().items():
            out[f"speech_encoder.{name}"] = tensor
        for kind in KINDS:
            for name, tensor in self.ie[kind].tensors().items():
                out[f"ie.{kind}.{name}"] = tensor
        for name, tensor in self.synth.tensors().items():
            out[f"synth.{name}"] = tensor
        return out

    def trainable_tensors(self):
        """Tensors the optimizer should update for the enabled modules.

        Disabled modules never enter the graph, so their tensors receive
        no gradient; with lambda_cl == 0 the contrastive losses are
        skipped entirely and modalities used only on the next side drop
        out as well. Prefix-mean pooling (ie_enabled=False) bypasses the
        attention projections, so those drop out too.
        """
        flags = self.config.module_flags
        kinds = flags.enabled_kinds()
        modalities = {KIND_MODALITIES[k][0] for k in kinds}
        if self.config.lambda_cl > 0:
            modalities |= {KIND_MODALITIES[k][1] for k in kinds}
        out = []
        if "text" in modalities:
            out += list(self.text_encoder.tensors().values())
        if "speech" in modalities:
            out += list(self.speech_encoder.tensors().values())
        if self.config.ie_enabled:
            for kind in kinds:
                out += list(self.ie[kind].tensors().values())
        out += list(self.synth.tensors().values())
        return out

    def load_named_tensors(self, arrays: dict[str, np.ndarray]):
        """Copy values into this model's tensors; keys and shapes must match."""
        named = self.named_tensors()
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise ConfigError(f"tensor name mismatch (missing {missing[:3]}, extra {extra[:3]})")
        for name, tensor in named.items():
            src = arrays[name]
            if tuple(src.shape) != tuple(tensor.shape):
                raise ConfigError(
                    f"tensor {name!r} has shape {tuple(src.shape)}, expected {tuple(tensor.shape)}")
            tensor.data = np.asarray(src, dtype=self.dtype).copy()
        return self
