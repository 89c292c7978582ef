"""Learned-vector rescaling of keys, values, and the FFN hidden state.

Three trainable vectors per layer multiply the attention keys, the
attention values, and the FFN intermediate activation elementwise. All
vectors start at one, so the module is exactly inert until trained.
"""

from __future__ import annotations

from peftkit import tensor as tt
from peftkit.peft.base import (
    IntegrationForm,
    Param,
    PeftHyperparams,
    PeftModule,
)
from peftkit.transformer import BaseConfig, attn_keys_values, ffn_intermediate
from peftkit.typology import PeftDescriptor


class IA3(PeftModule):
    technique = "ia3"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        d = base_config.model_dim
        f = base_config.ffn_dim
        self.layers = hyper.resolve_layers(base_config)
        self.vectors = {}
        for l in self.layers:
            self.vectors[l] = {
                "keys": tt.full((d,), 1.0, requires_grad=True),
                "values": tt.full((d,), 1.0, requires_grad=True),
                "ffn": tt.full((f,), 1.0, requires_grad=True),
            }

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="none:parameter-vector",
            inter_connectivity="fixed:dense",
            parameters_adapted="addition",
            parameter_sharing="none",
            input_type="weights",
            insertion_form="sequential",
            insertions="all-layers",
            integration_form=frozenset({"rescaling"}),
            workspace=frozenset({"ffn-intermediate", "attention-keys-values"}),
        )

    def bindings(self):
        out = []
        for l in self.layers:
            out.append((attn_keys_values(l), IntegrationForm.RESCALING))
            out.append((ffn_intermediate(l), IntegrationForm.RESCALING))
        return out

    def hooks(self):
        def make_kv(l):
            vecs = self.vectors[l]

            def hook(k, v):
                return tt.row_mul(k, vecs["keys"]), tt.row_mul(v, vecs["values"])
            return hook

        def make_ffn(l):
            vecs = self.vectors[l]

            def hook(a):
                return tt.row_mul(a, vecs["ffn"])
            return hook

        hooks = {}
        for l in self.layers:
            hooks[attn_keys_values(l)] = make_kv(l)
            hooks[ffn_intermediate(l)] = make_ffn(l)
        return hooks

    def trainable_tensors(self):
        out = []
        for l in self.layers:
            vecs = self.vectors[l]
            out.append(Param(f"layers.{l}.rescale.keys", l, vecs["keys"]))
            out.append(Param(f"layers.{l}.rescale.values", l, vecs["values"]))
            out.append(Param(f"layers.{l}.rescale.ffn", l, vecs["ffn"]))
        return out
