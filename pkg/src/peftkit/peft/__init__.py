"""Pluggable PEFT modules and their builders.

``build(technique, hyper, base_config)`` dispatches on canonical
technique names; the per-technique ``*_build`` functions mirror it for
direct use.
"""

from __future__ import annotations

from peftkit.peft.adapters import Adapter, Compacter, TinyAttentionAdapter
from peftkit.peft.base import (
    ComposedModel,
    IntegrationForm,
    Param,
    PeftHyperparams,
    PeftModule,
    apply_integration,
    attach,
    detach,
    sequence_loss,
)
from peftkit.peft.ia3 import IA3
from peftkit.peft.lora import LoRA
from peftkit.peft.prompts import (
    PrefixTuning,
    PrefixTuningExported,
    PromptTuning,
    prefix_export_final,
)
from peftkit.transformer import BaseConfig, BaseModel
from peftkit.typology import PeftDescriptor, canonical_name

_CLASSES = {
    "prompt-tuning": PromptTuning,
    "prefix-tuning": PrefixTuning,
    "lora": LoRA,
    "adapters": Adapter,
    "tiny-attention-adapters": TinyAttentionAdapter,
    "compacter": Compacter,
    "ia3": IA3,
}


def build(technique: str, hyper: PeftHyperparams,
          base_config: BaseConfig) -> PeftModule:
    return _CLASSES[canonical_name(technique)](base_config, hyper)


def prompt_tuning_build(hyper, base_config) -> PromptTuning:
    return PromptTuning(base_config, hyper)


def prefix_tuning_build(hyper, base_config) -> PrefixTuning:
    return PrefixTuning(base_config, hyper)


def lora_build(hyper, base_config) -> LoRA:
    return LoRA(base_config, hyper)


def adapter_build(hyper, base_config) -> Adapter:
    return Adapter(base_config, hyper)


def tiny_attention_adapter_build(hyper, base_config) -> TinyAttentionAdapter:
    return TinyAttentionAdapter(base_config, hyper)


def compacter_build(hyper, base_config) -> Compacter:
    return Compacter(base_config, hyper)


def ia3_build(hyper, base_config) -> IA3:
    return IA3(base_config, hyper)


class FullCopyControl(PeftModule):
    """Storage-ratio control: trains nothing, contributes nothing, but
    carries a trainable copy of every base parameter so its checkpoint
    is as large as the base's. Not a registry technique."""

    technique = "full-copy-control"

    def __init__(self, base: BaseModel):
        super().__init__(base.config, PeftHyperparams())
        self.copies = [(name, base.params[name].copy(requires_grad=True))
                       for name in sorted(base.params)]

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="none:parameter-vector",
            inter_connectivity="fixed:dense",
            parameters_adapted="addition",
            parameter_sharing="none",
            input_type="weights",
            insertion_form="parallel",
            insertions="all-layers",
            integration_form=frozenset({"direct-addition"}),
            workspace=frozenset({"embedding-layer"}),
        )

    def bindings(self):
        return []

    def hooks(self):
        return {}

    def trainable_tensors(self):
        return [Param(f"copy.{name}", None, t) for name, t in self.copies]


def full_copy_control(base: BaseModel) -> FullCopyControl:
    return FullCopyControl(base)


__all__ = [
    "Adapter", "Compacter", "ComposedModel", "FullCopyControl", "IA3",
    "IntegrationForm", "LoRA", "Param", "PeftHyperparams", "PeftModule",
    "PrefixTuning", "PrefixTuningExported", "PromptTuning",
    "adapter_build", "apply_integration", "attach", "build",
    "compacter_build", "detach", "full_copy_control", "ia3_build",
    "lora_build", "prefix_export_final", "prefix_tuning_build",
    "prompt_tuning_build", "sequence_loss", "tiny_attention_adapter_build",
]
