"""Low-rank adaptation of the attention query/value projections.

Per layer, each of the query and value projections gets a trainable
down/up factor pair (d x r and r x d). The module consumes the same
input as the frozen projections and contributes lora_scale * (x @ A @ B)
by scaled addition to the projection output. The up factor starts at
zero, so a freshly built module is an exact no-op.
"""

from __future__ import annotations

import math

from peftkit import tensor as tt
from peftkit.errors import ConfigError
from peftkit.peft.base import (
    IntegrationForm,
    Param,
    PeftHyperparams,
    PeftModule,
    apply_integration,
)
from peftkit.transformer import BaseConfig, attn_qv_weights
from peftkit.typology import PeftDescriptor

DEFAULT_RANK = 2


class LoRA(PeftModule):
    technique = "lora"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        d = base_config.model_dim
        r = hyper.bottleneck_dim or DEFAULT_RANK
        if not (1 <= r <= d):
            raise ConfigError(f"rank must satisfy 1 <= r <= {d}, got {r}")
        self.rank = r
        self.scale = hyper.lora_scale
        self.layers = hyper.resolve_layers(base_config)
        rng = self.rng()
        bound = 1.0 / math.sqrt(d)
        self.factors = {}
        for l in self.layers:
            self.factors[l] = {
                "q_down": tt.uniform((d, r), rng, bound, requires_grad=True),
                "q_up": tt.zeros((r, d), requires_grad=True),
                "v_down": tt.uniform((d, r), rng, bound, requires_grad=True),
                "v_up": tt.zeros((r, d), requires_grad=True),
            }

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="dense:linear-mlp",
            inter_connectivity="fixed:dense",
            parameters_adapted="reparameterisation",
            parameter_sharing="none",
            input_type="data",
            insertion_form="parallel",
            insertions="all-layers",
            integration_form=frozenset({"scaled-addition"}),
            workspace=frozenset({"attention-queries-values"}),
        )

    def bindings(self):
        return [(attn_qv_weights(l), IntegrationForm.SCALED_ADDITION)
                for l in self.layers]

    def hooks(self):
        def make(l):
            f = self.factors[l]

            def hook(x, q, v):
                dq = tt.matmul(tt.matmul(x, f["q_down"]), f["q_up"])
                dv = tt.matmul(tt.matmul(x, f["v_down"]), f["v_up"])
                q = apply_integration(IntegrationForm.SCALED_ADDITION, q, dq,
                                      self.scale)
                v = apply_integration(IntegrationForm.SCALED_ADDITION, v, dv,
                                      self.scale)
                return q, v
            return hook

        return {attn_qv_weights(l): make(l) for l in self.layers}

    def trainable_tensors(self):
        out = []
        for l in self.layers:
            f = self.factors[l]
            out.append(Param(f"layers.{l}.lora_q.down", l, f["q_down"]))
            out.append(Param(f"layers.{l}.lora_q.up", l, f["q_up"]))
            out.append(Param(f"layers.{l}.lora_v.down", l, f["v_down"]))
            out.append(Param(f"layers.{l}.lora_v.up", l, f["v_up"]))
        return out
