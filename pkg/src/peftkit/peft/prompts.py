"""Virtual-token techniques: prompt tuning and prefix tuning.

Prompt tuning trains a single matrix of token-like rows concatenated in
front of the input embeddings. Prefix tuning additionally trains, per
layer, a small network (virtual embeddings, then two linear maps with an
activation in between) whose output rows are concatenated to that
layer's attention keys and values; the concatenation is equivalent to a
gated addition of a prefix-only attention readout, which is what the
descriptor reports.
"""

from __future__ import annotations

import math

from peftkit import tensor as tt
from peftkit.errors import CompositionError, ConfigError
from peftkit.peft.base import (
    IntegrationForm,
    Param,
    PeftHyperparams,
    PeftModule,
)
from peftkit.tensor import Tensor
from peftkit.transformer import BaseConfig, BaseModel, attn_keys_values, embedding_output
from peftkit.typology import PeftDescriptor


class PromptTuning(PeftModule):
    technique = "prompt-tuning"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        n = hyper.n_virtual_tokens
        if n < 1:
            raise ConfigError(f"n_virtual_tokens must be >= 1, got {n}")
        d = base_config.model_dim
        self.prompt = tt.uniform((n, d), self.rng(), 1.0 / math.sqrt(d),
                                 requires_grad=True)
        self.virtual_prefix_rows = n

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="dense:embedding",
            inter_connectivity="fixed:dense",
            parameters_adapted="addition",
            parameter_sharing="none",
            input_type="weights",
            insertion_form="parallel",
            insertions="one-layer",
            integration_form=frozenset({"concatenation"}),
            workspace=frozenset({"embedding-layer"}),
        )

    def bindings(self):
        return [(embedding_output(), IntegrationForm.CONCATENATION)]

    def hooks(self):
        return {embedding_output(): lambda x: tt.concat([self.prompt, x], axis=0)}

    def trainable_tensors(self):
        return [Param("prompt", None, self.prompt)]


class PrefixTuning(PeftModule):
    technique = "prefix-tuning"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        n = hyper.n_virtual_tokens
        if n < 1:
            raise ConfigError(f"n_virtual_tokens must be >= 1, got {n}")
        if hyper.prefix_activation not in ("softmax", "tanh"):
            raise ConfigError(
                f"prefix_activation must be 'softmax' or 'tanh', "
                f"got {hyper.prefix_activation!r}"
            )
        d = base_config.model_dim
        # Full-width prefix rows: d_h defaults to the model dimension so
        # the produced rows concatenate directly onto keys/values.
        self.prefix_dim = hyper.bottleneck_dim or d
        self.layers = hyper.resolve_layers(base_config)
        rng = self.rng()
        bound = 1.0 / math.sqrt(d)
        self.emb = tt.uniform((n, d), rng, bound, requires_grad=True)
        self.net = {}
        for l in self.layers:
            self.net[l] = {
                "virtual": tt.uniform((n, d), rng, bound, requires_grad=True),
                "w1": tt.uniform((d, d), rng, bound, requires_grad=True),
                "w2": tt.uniform((d, 2 * self.prefix_dim), rng, bound,
                                 requires_grad=True),
            }
        self.virtual_prefix_rows = n

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="dense:nonlinear-mlp",
            inter_connectivity="fixed:dense",
            parameters_adapted="addition",
            parameter_sharing="none",
            input_type="weights",
            insertion_form="parallel",
            insertions="all-layers",
            integration_form=frozenset({"gated-addition"}),
            workspace=frozenset({"embedding-layer", "attention-keys-values"}),
        )

    def bindings(self):
        out = [(embedding_output(), IntegrationForm.CONCATENATION)]
        out += [(attn_keys_values(l), IntegrationForm.CONCATENATION)
                for l in self.layers]
        return out

    def prefix_rows(self, layer: int) -> tuple[Tensor, Tensor]:
        """Evaluate the layer's reparameterization network: (n, d_h)
        prefix key rows and (n, d_h) prefix value rows."""
        net = self.net[layer]
        h = tt.matmul(net["virtual"], net["w1"])
        h = tt.softmax(h) if self.hyper.prefix_activation == "softmax" else tt.tanh(h)
        p = tt.matmul(h, net["w2"])
        dh = self.prefix_dim
        return tt.slice_cols(p, 0, dh), tt.slice_cols(p, dh, 2 * dh)

    def hooks(self):
        hooks = {embedding_output():
                 lambda x: tt.concat([self.emb, x], axis=0)}

        def make(l):
            def hook(k, v):
                pk, pv = self.prefix_rows(l)
                return tt.concat([pk, k], axis=0), tt.concat([pv, v], axis=0)
            return hook

        for l in self.layers:
            hooks[attn_keys_values(l)] = make(l)
        return hooks

    def trainable_tensors(self):
        out = [Param("embedding.prefix", None, self.emb)]
        for l in self.layers:
            net = self.net[l]
            out.append(Param(f"layers.{l}.prefix.virtual", l, net["virtual"]))
            out.append(Param(f"layers.{l}.prefix.w1", l, net["w1"]))
            out.append(Param(f"layers.{l}.prefix.w2", l, net["w2"]))
        return out

    def validate_for_attach(self, base: BaseModel) -> None:
        d = base.config.model_dim
        if self.prefix_dim != d:
            raise CompositionError(
                f"prefix rows of width {self.prefix_dim} cannot concatenate "
                f"onto keys/values of width {d}; build with bottleneck_dim="
                f"{d} (or leave it unset)"
            )


class PrefixTuningExported(PeftModule):
    """Prefix tuning after discarding the reparameterization network:
    only the computed prefix key/value rows (and the embedding-layer
    rows) are kept. Forward behavior is identical to the full module it
    was exported from."""

    technique = "prefix-tuning"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams,
                 emb: Tensor, per_layer: dict[int, tuple[Tensor, Tensor]]):
        super().__init__(base_config, hyper)
        self.emb = emb
        self.per_layer = per_layer
        self.layers = tuple(sorted(per_layer))
        self.prefix_dim = hyper.bottleneck_dim or base_config.model_dim
        self.virtual_prefix_rows = hyper.n_virtual_tokens

    def descriptor(self) -> PeftDescriptor:
        return PrefixTuning.descriptor(self)

    def bindings(self):
        out = [(embedding_output(), IntegrationForm.CONCATENATION)]
        out += [(attn_keys_values(l), IntegrationForm.CONCATENATION)
                for l in self.layers]
        return out

    def hooks(self):
        hooks = {embedding_output():
                 lambda x: tt.concat([self.emb, x], axis=0)}

        def make(l):
            pk, pv = self.per_layer[l]

            def hook(k, v):
                return tt.concat([pk, k], axis=0), tt.concat([pv, v], axis=0)
            return hook

        for l in self.layers:
            hooks[attn_keys_values(l)] = make(l)
        return hooks

    def trainable_tensors(self):
        out = [Param("embedding.prefix", None, self.emb)]
        for l in self.layers:
            pk, pv = self.per_layer[l]
            out.append(Param(f"layers.{l}.prefix_k", l, pk))
            out.append(Param(f"layers.{l}.prefix_v", l, pv))
        return out

    def hyperparams(self):
        h = super().hyperparams()
        h["exported"] = 1
        return h

    def validate_for_attach(self, base: BaseModel) -> None:
        PrefixTuning.validate_for_attach(self, base)


def prefix_export_final(module: PrefixTuning) -> PrefixTuningExported:
    """Freeze the network's output: evaluate each layer's prefix rows
    once, keep the rows, drop the network."""
    if not isinstance(module, PrefixTuning):
        raise ConfigError("prefix_export_final expects a full PrefixTuning module")
    per_layer = {}
    for l in module.layers:
        pk, pv = module.prefix_rows(l)
        per_layer[l] = (pk.copy(requires_grad=True), pv.copy(requires_grad=True))
    return PrefixTuningExported(module.base_config, module.hyper,
                                module.emb.copy(requires_grad=True), per_layer)
