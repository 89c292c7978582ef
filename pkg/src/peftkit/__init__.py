"""peftkit: a desk-scale workbench for parameter-efficient finetuning.

Seven PEFT techniques as pluggable modules over a frozen toy
transformer, with a machine-readable structural typology, an efficiency
analyzer, a deterministic training harness, and bit-exact checkpoints.

Quick start:

    from peftkit import (BaseConfig, PeftHyperparams, attach, build,
                         build_base)

    cfg = BaseConfig(num_layers=2, model_dim=16, num_heads=2, vocab_size=32)
    base = build_base(cfg, seed=0)
    composed = attach(base, build("lora", PeftHyperparams(), cfg))
    logits, trace = composed.forward([[3, 1, 4, 1, 5]])
"""

from peftkit.backend import BACKEND_NAME
from peftkit.peft import (
    ComposedModel,
    IntegrationForm,
    Param,
    PeftHyperparams,
    PeftModule,
    attach,
    build,
    detach,
    prefix_export_final,
)
from peftkit.transformer import BaseConfig, BaseModel, build_base
from peftkit.typology import (
    REGISTRY,
    TECHNIQUES,
    PeftDescriptor,
    descriptor_diff,
    registry_lookup,
    validate_descriptor,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME", "BaseConfig", "BaseModel", "ComposedModel",
    "IntegrationForm", "Param", "PeftDescriptor", "PeftHyperparams",
    "PeftModule", "REGISTRY", "TECHNIQUES", "__version__", "attach",
    "build", "build_base", "descriptor_diff", "detach",
    "prefix_export_final", "registry_lookup", "validate_descriptor",
]
