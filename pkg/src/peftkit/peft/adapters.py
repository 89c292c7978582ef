"""Sequential bottleneck adapters and their two structural variants.

* ``Adapter``: per layer, two down/ReLU/up stacks added directly onto
  the attention block output and the FFN block output.
* ``TinyAttentionAdapter``: replaces the bottleneck with a single-head
  attention of tiny projection width over the sequence; its mixing
  weights depend on the input, so its connectivity to the base is
  dynamic rather than fixed.
* ``Compacter``: adapter whose down and up weight matrices are each
  materialized as a sum of Kronecker products, with the small left
  factors shared between the down and up sides of a stack.

All three zero-initialize their output side, so a freshly built module
leaves the base model's logits exactly unchanged.
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
)
from peftkit.tensor import Tensor
from peftkit.transformer import (
    BaseConfig,
    post_attention,
    post_ffn,
    scaled_attention,
)
from peftkit.typology import PeftDescriptor

DEFAULT_BOTTLENECK = 4

_STACKS = ("attn", "ffn")
_STACK_SLOT = {"attn": post_attention, "ffn": post_ffn}


class Adapter(PeftModule):
    technique = "adapters"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        d = base_config.model_dim
        dh = hyper.bottleneck_dim or DEFAULT_BOTTLENECK
        if dh < 1:
            raise ConfigError(f"bottleneck_dim must be >= 1, got {dh}")
        self.bottleneck = dh
        self.layers = hyper.resolve_layers(base_config)
        self.with_bias = hyper.adapter_bias
        rng = self.rng()
        bound = 1.0 / math.sqrt(d)
        self.stacks = {}
        for l in self.layers:
            for stack in _STACKS:
                entry = {
                    "down": tt.uniform((d, dh), rng, bound, requires_grad=True),
                    "up": tt.zeros((dh, d), requires_grad=True),
                }
                if self.with_bias:
                    entry["down_bias"] = tt.zeros((dh,), requires_grad=True)
                    entry["up_bias"] = tt.zeros((d,), requires_grad=True)
                self.stacks[(l, stack)] = entry

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="dense:nonlinear-mlp",
            inter_connectivity="fixed:dense",
            parameters_adapted="addition",
            parameter_sharing="none",
            input_type="hidden",
            insertion_form="sequential",
            insertions="all-layers",
            integration_form=frozenset({"direct-addition"}),
            workspace=frozenset({"ffn-layer", "attention-layer"}),
        )

    def bindings(self):
        out = []
        for l in self.layers:
            out.append((post_attention(l), IntegrationForm.DIRECT_ADDITION))
            out.append((post_ffn(l), IntegrationForm.DIRECT_ADDITION))
        return out

    def _bottleneck_pass(self, h: Tensor, entry) -> Tensor:
        z = tt.matmul(h, entry["down"])
        if self.with_bias:
            z = tt.row_add(z, entry["down_bias"])
        z = tt.matmul(tt.relu(z), entry["up"])
        if self.with_bias:
            z = tt.row_add(z, entry["up_bias"])
        return z

    def hooks(self):
        def make(l, stack):
            entry = self.stacks[(l, stack)]

            def hook(h):
                return tt.add(h, self._bottleneck_pass(h, entry))
            return hook

        return {_STACK_SLOT[stack](l): make(l, stack)
                for l in self.layers for stack in _STACKS}

    def trainable_tensors(self):
        out = []
        for l in self.layers:
            for stack in _STACKS:
                entry = self.stacks[(l, stack)]
                for name in sorted(entry):
                    out.append(Param(f"layers.{l}.{stack}_adapter.{name}", l,
                                     entry[name]))
        return out


class TinyAttentionAdapter(PeftModule):
    technique = "tiny-attention-adapters"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        d = base_config.model_dim
        dt = hyper.tiny_dim
        if dt < 1:
            raise ConfigError(f"tiny_dim must be >= 1, got {dt}")
        self.tiny_dim = dt
        self.causal = base_config.causal
        self.layers = hyper.resolve_layers(base_config)
        rng = self.rng()
        bound = 1.0 / math.sqrt(d)
        self.maps = {}
        for l in self.layers:
            self.maps[l] = {
                "wq": tt.uniform((d, dt), rng, bound, requires_grad=True),
                "wk": tt.uniform((d, dt), rng, bound, requires_grad=True),
                "wv": tt.uniform((d, dt), rng, bound, requires_grad=True),
                "wo": tt.zeros((dt, d), requires_grad=True),
            }

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="dense:self-attention",
            inter_connectivity="dynamic",
            parameters_adapted="addition",
            parameter_sharing="none",
            input_type="hidden",
            insertion_form="sequential",
            insertions="all-layers",
            integration_form=frozenset({"direct-addition"}),
            workspace=frozenset({"attention-layer"}),
        )

    def bindings(self):
        return [(post_attention(l), IntegrationForm.DIRECT_ADDITION)
                for l in self.layers]

    def mixture_weights(self, h: Tensor, layer: int) -> Tensor:
        """Input-dependent attention weights of the tiny head."""
        m = self.maps[layer]
        _, probs = scaled_attention(tt.matmul(h, m["wq"]), tt.matmul(h, m["wk"]),
                                    tt.matmul(h, m["wv"]), self.causal)
        return probs

    def hooks(self):
        def make(l):
            m = self.maps[l]

            def hook(h):
                mix, _ = scaled_attention(tt.matmul(h, m["wq"]),
                                          tt.matmul(h, m["wk"]),
                                          tt.matmul(h, m["wv"]), self.causal)
                return tt.add(h, tt.matmul(mix, m["wo"]))
            return hook

        return {post_attention(l): make(l) for l in self.layers}

    def trainable_tensors(self):
        out = []
        for l in self.layers:
            m = self.maps[l]
            for name in ("wq", "wk", "wv", "wo"):
                out.append(Param(f"layers.{l}.tiny_attn.{name}", l, m[name]))
        return out


class Compacter(PeftModule):
    technique = "compacter"

    def __init__(self, base_config: BaseConfig, hyper: PeftHyperparams):
        super().__init__(base_config, hyper)
        d = base_config.model_dim
        dh = hyper.bottleneck_dim or DEFAULT_BOTTLENECK
        n = hyper.kron_order
        if n < 1:
            raise ConfigError(f"kron_order must be >= 1, got {n}")
        if d % n != 0 or dh % n != 0:
            raise ConfigError(
                f"kron_order {n} must divide model_dim {d} and "
                f"bottleneck_dim {dh}"
            )
        self.bottleneck = dh
        self.order = n
        self.layers = hyper.resolve_layers(base_config)
        rng = self.rng()
        bound = 1.0 / math.sqrt(d)
        self.stacks = {}
        for l in self.layers:
            for stack in _STACKS:
                self.stacks[(l, stack)] = {
                    # left factors, shared between the down and up sides
                    "shared_a": [tt.uniform((n, n), rng, bound, requires_grad=True)
                                 for _ in range(n)],
                    "down_b": [tt.uniform((d // n, dh // n), rng, bound,
                                          requires_grad=True)
                               for _ in range(n)],
                    "up_b": [tt.zeros((dh // n, d // n), requires_grad=True)
                             for _ in range(n)],
                }

    def descriptor(self) -> PeftDescriptor:
        return PeftDescriptor(
            intra_connectivity="dense:nonlinear-mlp",
            inter_connectivity="fixed:dense",
            parameters_adapted="addition",
            parameter_sharing="shared",
            input_type="hidden",
            insertion_form="sequential",
            insertions="all-layers",
            integration_form=frozenset({"direct-addition"}),
            workspace=frozenset({"ffn-layer", "attention-layer"}),
        )

    def bindings(self):
        out = []
        for l in self.layers:
            out.append((post_attention(l), IntegrationForm.DIRECT_ADDITION))
            out.append((post_ffn(l), IntegrationForm.DIRECT_ADDITION))
        return out

    def materialize(self, layer: int, stack: str) -> tuple[Tensor, Tensor]:
        """Rebuild (W_down, W_up) from the Kronecker factors. Called on
        every forward so gradients reach the factors."""
        entry = self.stacks[(layer, stack)]
        down = None
        up = None
        for a, bd, bu in zip(entry["shared_a"], entry["down_b"], entry["up_b"]):
            term_d = tt.kron(a, bd)
            term_u = tt.kron(a, bu)
            down = term_d if down is None else tt.add(down, term_d)
            up = term_u if up is None else tt.add(up, term_u)
        return down, up

    def hooks(self):
        def make(l, stack):
            def hook(h):
                w_down, w_up = self.materialize(l, stack)
                return tt.add(h, tt.matmul(tt.relu(tt.matmul(h, w_down)), w_up))
            return hook

        return {_STACK_SLOT[stack](l): make(l, stack)
                for l in self.layers for stack in _STACKS}

    def trainable_tensors(self):
        out = []
        for l in self.layers:
            for stack in _STACKS:
                entry = self.stacks[(l, stack)]
                for i, t in enumerate(entry["shared_a"]):
                    out.append(Param(f"layers.{l}.{stack}_compacter.shared_a.{i}",
                                     l, t))
                for i, t in enumerate(entry["down_b"]):
                    out.append(Param(f"layers.{l}.{stack}_compacter.down_b.{i}",
                                     l, t))
                for i, t in enumerate(entry["up_b"]):
                    out.append(Param(f"layers.{l}.{stack}_compacter.up_b.{i}",
                                     l, t))
        return out
