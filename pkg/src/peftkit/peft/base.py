"""The uniform PEFT module contract and base/module composition.

A module owns its trainable tensors, declares which slots it binds and
with which integration form, supplies the hook functions that compute
its per-slot contribution, and self-describes with a typology
descriptor. Base model parameters never appear among a module's
trainable tensors.
"""

from __future__ import annotations

import enum
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Optional

from peftkit import tensor as tt
from peftkit.errors import CompositionError, ConfigError
from peftkit.tensor import Tensor
from peftkit.transformer import BaseConfig, BaseModel, SlotId, forward_with_hooks
from peftkit.typology import PeftDescriptor


class IntegrationForm(enum.Enum):
    """How a module's output enters the base model's data flow."""

    CONCATENATION = "concatenation"
    SCALED_ADDITION = "scaled-addition"
    DIRECT_ADDITION = "direct-addition"
    GATED_ADDITION = "gated-addition"
    RESCALING = "rescaling"


def apply_integration(form: IntegrationForm, h: Tensor, delta: Tensor,
                      lam: float = 1.0) -> Tensor:
    """Combine a slot value h with a module contribution delta.

    scaled addition: h + lam*delta; direct addition: h + delta;
    gated addition: (1-lam)*h + lam*delta with lam in [0, 1];
    rescaling: h (*) delta elementwise.
    """
    if form is IntegrationForm.SCALED_ADDITION:
        return tt.add(h, tt.scale(delta, lam))
    if form is IntegrationForm.DIRECT_ADDITION:
        return tt.add(h, delta)
    if form is IntegrationForm.GATED_ADDITION:
        if not (0.0 <= lam <= 1.0):
            raise ConfigError(f"gated addition requires lam in [0,1], got {lam}")
        return tt.add(tt.scale(h, 1.0 - lam), tt.scale(delta, lam))
    if form is IntegrationForm.RESCALING:
        if delta.shape == h.shape:
            return tt.hadamard(h, delta)
        return tt.row_mul(h, delta)
    raise ConfigError("concatenation is slot-specific; no generic combiner")


@dataclass(frozen=True)
class PeftHyperparams:
    """Shared hyperparameter record for all techniques.

    ``bottleneck_dim`` doubles as the adapter/compacter hidden width,
    the LoRA rank, and the prefix key/value width; ``None`` picks the
    per-technique default. ``layers`` restricts per-layer insertions
    (None = all layers).
    """

    n_virtual_tokens: int = 4
    bottleneck_dim: Optional[int] = None
    kron_order: int = 2
    tiny_dim: int = 1
    lora_scale: float = 1.0
    layers: Optional[tuple[int, ...]] = None
    seed: int = 0
    prefix_activation: str = "softmax"  # or "tanh"
    adapter_bias: bool = False

    def with_(self, **kw) -> "PeftHyperparams":
        return replace(self, **kw)

    def resolve_layers(self, base: BaseConfig) -> tuple[int, ...]:
        if self.layers is None:
            return tuple(range(base.num_layers))
        out = tuple(sorted(set(int(l) for l in self.layers)))
        for l in out:
            if not (0 <= l < base.num_layers):
                raise ConfigError(
                    f"insertion layer {l} outside [0, {base.num_layers})"
                )
        return out


@dataclass(frozen=True)
class Param:
    """One named trainable tensor; ``layer`` is None for non-layer
    insertions such as a prompt matrix."""

    name: str
    layer: Optional[int]
    tensor: Tensor


class PeftModule(ABC):
    """Behavioral contract every technique implements."""

    technique: str = ""

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        self.base_config = base_config
        self.hyper = hyper

    @abstractmethod
    def descriptor(self) -> PeftDescriptor:
        ...

    @abstractmethod
    def bindings(self) -> list[tuple[SlotId, IntegrationForm]]:
        """Slot bindings, constant for the module's lifetime."""

    @abstractmethod
    def hooks(self) -> dict[SlotId, object]:
        ...

    @abstractmethod
    def trainable_tensors(self) -> list[Param]:
        ...

    def hyperparams(self) -> dict:
        """Flat, serializable hyperparameter mapping."""
        h = self.hyper
        return {
            "n_virtual_tokens": h.n_virtual_tokens,
            "bottleneck_dim": h.bottleneck_dim,
            "kron_order": h.kron_order,
            "tiny_dim": h.tiny_dim,
            "lora_scale": h.lora_scale,
            "layers": ",".join(map(str, h.layers)) if h.layers else "",
            "seed": h.seed,
            "prefix_activation": h.prefix_activation,
            "adapter_bias": int(h.adapter_bias),
        }

    def validate_for_attach(self, base: BaseModel) -> None:
        """Hook for functional constraints beyond config equality."""

    # The number of virtual rows the module prepends to the sequence;
    # downstream targets apply to rows [offset, offset+T).
    virtual_prefix_rows: int = 0

    def rng(self) -> random.Random:
        return random.Random(f"{self.technique}:{self.hyper.seed}")

    def check_names_unique(self) -> None:
        names = [p.name for p in self.trainable_tensors()]
        if len(names) != len(set(names)):
            raise ConfigError(f"duplicate trainable tensor names in {self.technique}")


def sequence_loss(logits, targets, virtual_prefix_rows: int = 0) -> Tensor:
    """Mean cross-entropy over a batch of sequences.

    ``virtual_prefix_rows`` logit rows are skipped at the front of every
    sequence (virtual-token techniques extend the sequence); targets
    shorter than the remaining rows apply to the trailing positions.
    """
    total = None
    for lg, tgt in zip(logits, targets):
        rows = lg
        if virtual_prefix_rows:
            rows = tt.slice_rows(lg, virtual_prefix_rows, lg.shape[0])
        if len(tgt) != rows.shape[0]:
            rows = tt.slice_rows(rows, rows.shape[0] - len(tgt), rows.shape[0])
        term = tt.cross_entropy(rows, tgt)
        total = term if total is None else tt.add(total, term)
    return tt.scale(total, 1.0 / len(logits))


class ComposedModel:
    """A frozen base with exactly one PEFT module attached."""

    def __init__(self, base: BaseModel, module: PeftModule):
        self.base = base
        self.module = module
        self._hooks = module.hooks()

    def forward(self, tokens):
        return forward_with_hooks(self.base, tokens, self._hooks)

    def loss(self, tokens, targets) -> Tensor:
        logits, _ = self.forward(tokens)
        return sequence_loss(logits, targets, self.module.virtual_prefix_rows)

    def trainable_tensors(self) -> list[Param]:
        return self.module.trainable_tensors()

    def detach(self) -> BaseModel:
        return detach(self)


def attach(base: BaseModel, module: PeftModule) -> ComposedModel:
    """Compose; enforces config equality and the single-module policy."""
    if module.base_config != base.config:
        raise CompositionError(
            f"module built for {module.base_config} cannot attach to base "
            f"with {base.config}"
        )
    if base._attached is not None:
        raise CompositionError(
            f"base already has {base._attached.technique!r} attached; "
            "slots are exclusive (single-module policy)"
        )
    for p in module.trainable_tensors():
        if not p.tensor.requires_grad:
            raise CompositionError(
                f"trainable tensor {p.name} of {module.technique} has "
                "requires_grad=False"
            )
        if any(p.tensor is bt for bt in base.params.values()):
            raise CompositionError(
                f"module tensor {p.name} aliases a base parameter"
            )
    module.check_names_unique()
    module.validate_for_attach(base)
    base._attached = module
    return ComposedModel(base, module)


def detach(composed: ComposedModel) -> BaseModel:
    """Restore the pure base; its parameters were never touched."""
    composed.base._attached = None
    return composed.base
