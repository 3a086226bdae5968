"""
The six classifier architectures. Every model maps a batch of sampled score
tensors [B, 3s, P, F] (or one tensor [3s, P, F]) to un-normalized class
confidences. No layer has a bias term.
"""

import json
import math
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from artifacts import atomic_write_text
from autodiff import (
    DiffTensor,
    add,
    channels,
    conv_pitch,
    conv_time,
    linear,
    load_checkpoint,
    mean_pool,
    relu,
    reshape,
    save_checkpoint,
    sum_pool,
    transpose,
)
from errors import CheckpointFormatError, ShapeMismatch, UnknownArchitecture
from tensor_encoder import SAMPLE_SIZE

logger = logging.getLogger(__name__)


class Architecture(str, Enum):
    HISTOGRAM = "histogram"
    VOICE = "voice"
    VOICE_DEEP = "voice-deep"
    FULL = "full"
    HARMONIC = "harmonic"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, name: str) -> "Architecture":
        key = name.strip().lower().replace("_", "-")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = "|".join(a.value for a in cls)
            raise UnknownArchitecture(f"unknown architecture {name!r} (expected {choices})") from None


_ALIASES = {
    "voiceconv": "voice",
    "voice-conv": "voice",
    "voicedeep": "voice-deep",
    "fullconv": "full",
    "full-conv": "full",
}

ARCH_DEFAULTS = {
    Architecture.HISTOGRAM: {},
    Architecture.VOICE: {"n": 3, "k": 500},
    Architecture.VOICE_DEEP: {"n": 3, "k": 300, "k2": 300},
    Architecture.FULL: {"n": 3, "k": 300, "k2": 300},
    Architecture.HARMONIC: {"harmonic_k": 64, "harmonic_k2": 500},
    Architecture.HYBRID: {"n": 3, "k": 300, "k2": 300, "harmonic_k": 64, "harmonic_k2": 500},
}


class ModelConfig(BaseModel):
    architecture: Architecture
    N: int = Field(gt=0)
    D: int = Field(gt=0)
    P: int = Field(gt=0)
    C: int = Field(19, gt=0)
    s: int = Field(SAMPLE_SIZE, gt=0)
    n: int = Field(3, gt=0)
    k: int = Field(300, gt=0)
    k2: int = Field(300, gt=0)
    j: Optional[int] = Field(None, gt=0)
    harmonic_k: int = Field(64, gt=0)
    harmonic_k2: int = Field(500, gt=0)

    @model_validator(mode="after")
    def _pitch_window(self):
        if self.j is None:
            self.j = max(1, self.N // 2)
        if self.j > self.N:
            raise ValueError(f"pitch window j={self.j} exceeds N={self.N}")
        return self

    @property
    def F(self) -> int:
        return self.N + self.D + 1

    @classmethod
    def for_architecture(cls, architecture, N: int, D: int, P: int, C: int = 19, s: int = SAMPLE_SIZE, **overrides) -> "ModelConfig":
        arch = architecture if isinstance(architecture, Architecture) else Architecture.parse(architecture)
        fields = {"architecture": arch, "N": N, "D": D, "P": P, "C": C, "s": s}
        fields.update(ARCH_DEFAULTS[arch])
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)


# ========== Parameters ==========

def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, int]]:
    c = config
    arch = c.architecture
    if arch == Architecture.HISTOGRAM:
        return {"W": (c.F, c.C)}
    if arch == Architecture.VOICE:
        return {"W1": (c.n * c.F, c.k), "W": (c.k, c.C)}
    if arch == Architecture.VOICE_DEEP:
        return {"W1": (c.n * c.F, c.k), "W2": (c.n * c.k, c.k2), "W": (c.k2, c.C)}
    if arch == Architecture.FULL:
        return {"W1": (c.n * c.P * c.F, c.k), "W2": (c.n * c.k, c.k2), "W": (c.k2, c.C)}
    harmonic = {
        "W1": (c.j * c.P, c.harmonic_k),
        "W2": (c.harmonic_k, c.harmonic_k2),
        "W3": (c.D + 1, c.harmonic_k2),
    }
    if arch == Architecture.HARMONIC:
        return {**harmonic, "W": (c.harmonic_k2, c.C)}
    return {
        "conv.W1": (c.n * c.F, c.k),
        "conv.W2": (c.n * c.k, c.k2),
        **{f"harmonic.{name}": shape for name, shape in harmonic.items()},
        "Wc": (c.k2, c.C),
        "Wh": (c.harmonic_k2, c.C),
    }


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(shape) for shape in param_shapes(config).values())


def init_params(config: ModelConfig, seed: int = 0) -> Dict[str, DiffTensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight matrix."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        bound = 1.0 / math.sqrt(shape[0])
        params[name] = DiffTensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
    return params


def predict(logits) -> np.ndarray:
    """Argmax over the class axis; the lowest index wins exact ties."""
    values = logits.values if isinstance(logits, DiffTensor) else np.asarray(logits)
    return np.argmax(values, axis=-1)


# ========== Feature extractors ==========

def _batched(x, config: ModelConfig) -> Tuple[DiffTensor, bool]:
    x = x if isinstance(x, DiffTensor) else DiffTensor(x)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[2:] != (config.P, config.F):
        raise ShapeMismatch(f"input {x.shape} does not match [B, L, {config.P}, {config.F}]")
    return x, single


def _unbatch(logits: DiffTensor, single: bool) -> DiffTensor:
    return reshape(logits, logits.shape[1:]) if single else logits


def h_voice(x: DiffTensor, W1, n: int) -> DiffTensor:
    per_voice = transpose(x, (0, 2, 1, 3))
    h = relu(conv_time(per_voice, W1, n))
    return mean_pool(h, (1, 2))


def h_conv(x: DiffTensor, W1, W2, n: int) -> DiffTensor:
    """Two per-voice time convolutions pooled over voices and time: [B, k2]."""
    per_voice = transpose(x, (0, 2, 1, 3))
    h1 = relu(conv_time(per_voice, W1, n))
    h2 = relu(conv_time(h1, W2, n))
    return mean_pool(h2, (1, 2))


def h_full(x: DiffTensor, W1, W2, n: int) -> DiffTensor:
    B, L, P, F = x.shape
    slices = reshape(x, (B, L, P * F))
    h1 = relu(conv_time(slices, W1, n))
    h2 = relu(conv_time(h1, W2, n))
    return mean_pool(h2, 1)


def h_harmonic(x: DiffTensor, W1, W2, W3, j: int, N: int) -> DiffTensor:
    """
    Pitch convolution over all voices, pooled over pitch, then combined with
    the voice-summed note-value and continuation channels and pooled over
    time: [B, harmonic_k2].
    """
    f = channels(x, 0, N)
    d = channels(x, N, x.shape[-1])
    h = mean_pool(relu(conv_pitch(f, W1, j)), 2)
    d_sum = sum_pool(d, 2)
    h2 = relu(add(linear(h, W2), linear(d_sum, W3)))
    return mean_pool(h2, 1)


# ========== Architectures ==========

def forward_histogram(x, params, config: ModelConfig) -> DiffTensor:
    x, single = _batched(x, config)
    return _unbatch(linear(mean_pool(x, (1, 2)), params["W"]), single)


def forward_voice_conv(x, params, config: ModelConfig) -> DiffTensor:
    x, single = _batched(x, config)
    return _unbatch(linear(h_voice(x, params["W1"], config.n), params["W"]), single)


def forward_voice_deep(x, params, config: ModelConfig) -> DiffTensor:
    x, single = _batched(x, config)
    h = h_conv(x, params["W1"], params["W2"], config.n)
    return _unbatch(linear(h, params["W"]), single)


def forward_full_conv(x, params, config: ModelConfig) -> DiffTensor:
    x, single = _batched(x, config)
    h = h_full(x, params["W1"], params["W2"], config.n)
    return _unbatch(linear(h, params["W"]), single)


def forward_harmonic(x, params, config: ModelConfig) -> DiffTensor:
    x, single = _batched(x, config)
    h = h_harmonic(x, params["W1"], params["W2"], params["W3"], config.j, config.N)
    return _unbatch(linear(h, params["W"]), single)


def forward_hybrid(x, params, config: ModelConfig) -> DiffTensor:
    x, single = _batched(x, config)
    hc = h_conv(x, params["conv.W1"], params["conv.W2"], config.n)
    hh = h_harmonic(
        x, params["harmonic.W1"], params["harmonic.W2"], params["harmonic.W3"], config.j, config.N
    )
    return _unbatch(add(linear(hc, params["Wc"]), linear(hh, params["Wh"])), single)


FORWARDS = {
    Architecture.HISTOGRAM: forward_histogram,
    Architecture.VOICE: forward_voice_conv,
    Architecture.VOICE_DEEP: forward_voice_deep,
    Architecture.FULL: forward_full_conv,
    Architecture.HARMONIC: forward_harmonic,
    Architecture.HYBRID: forward_hybrid,
}


def forward(x, params, config: ModelConfig) -> DiffTensor:
    return FORWARDS[config.architecture](x, params, config)


# ========== Checkpoints ==========

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_model(path, config: ModelConfig, params: Dict[str, DiffTensor], vocab_digest: str = "", extra: Optional[dict] = None):
    """Write the parameter container and a JSON sidecar next to it."""
    save_checkpoint(path, params)
    meta = {
        "architecture": config.architecture.value,
        "config": config.model_dump(mode="json"),
        "vocab_sha256": vocab_digest,
        "param_count": param_count(config),
        **(extra or {}),
    }
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> Tuple[ModelConfig, Dict[str, DiffTensor], dict]:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointFormatError(f"{path}: missing sidecar {side.name}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{side}: malformed sidecar: {e}") from e

    arrays = load_checkpoint(path)
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        raise CheckpointFormatError(f"{path}: parameters {sorted(arrays)} do not match {config.architecture.value}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointFormatError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    params = {name: DiffTensor(arrays[name], requires_grad=True, name=name) for name in expected}
    return config, params, meta


def describe(config: ModelConfig) -> List[str]:
    lines = [f"{config.architecture.value}: C={config.C} N={config.N} D={config.D} P={config.P} s={config.s}"]
    for name, shape in param_shapes(config).items():
        lines.append(f"  {name:<14} {shape[0]:>6} x {shape[1]:<6}")
    lines.append(f"  total parameters: {param_count(config):,}")
    return lines
