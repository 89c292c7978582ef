"""Frozen decoder-style transformer exposing named insertion slots.

The model stands in for a pretrained language model: parameters are
randomly initialized, marked non-trainable, and never updated. PEFT
modules interact with it exclusively through hooks registered at the
named slots below; with no hooks the forward pass is the pure frozen
model.

Slots (one per plug point, layer-indexed where applicable):

* ``embedding_output``      token embeddings, before positional terms
* ``attn_qv_weights(l)``    query/value projection outputs plus their input
* ``attn_keys_values(l)``   key/value rows entering attention
* ``post_attention(l)``     attention block output (after residual + norm)
* ``ffn_intermediate(l)``   FFN hidden activation
* ``post_ffn(l)``           FFN block output (after residual + norm)

Positional embeddings for rows prepended at ``embedding_output`` come
from positions [0, n); real tokens are shifted to [n, n+T).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable, NamedTuple, Optional

from peftkit import tensor as tt
from peftkit.errors import ConfigError, SlotContractError
from peftkit.tensor import Tensor

MASK_NEG = -1e30


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class BaseConfig:
    """Dimensions of the frozen base model.

    ``ffn_dim`` defaults to 4 * model_dim; several closed-form parameter
    counts assume that ratio.
    """

    num_layers: int
    model_dim: int
    num_heads: int
    vocab_size: int
    ffn_dim: Optional[int] = None
    max_seq_len: int = 64
    causal: bool = True
    pre_norm: bool = False

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.model_dim < 1 or self.vocab_size < 1 or self.max_seq_len < 1:
            raise ConfigError(f"dimensions must be positive: {self}")
        if self.num_heads < 1 or self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads must divide model_dim: {self.model_dim} % "
                f"{self.num_heads} != 0"
            )
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.model_dim)
        if self.ffn_dim < 1:
            raise ConfigError(f"ffn_dim must be positive, got {self.ffn_dim}")

    def canonical_text(self) -> str:
        """Stable key=value serialization, used for fingerprinting."""
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = int(v)
            parts.append(f"{f.name}={v}")
        return ";".join(parts)


# ----------------------------------------------------------------- slots

class SlotId(NamedTuple):
    """A named insertion point; ``layer`` is None for the embedding slot."""

    kind: str
    layer: Optional[int]

    def __str__(self):
        return self.kind if self.layer is None else f"{self.kind}[{self.layer}]"


EMBEDDING_OUTPUT = "embedding_output"
ATTN_QV_WEIGHTS = "attn_qv_weights"
ATTN_KEYS_VALUES = "attn_keys_values"
POST_ATTENTION = "post_attention"
FFN_INTERMEDIATE = "ffn_intermediate"
POST_FFN = "post_ffn"

_LAYER_KINDS = (ATTN_QV_WEIGHTS, ATTN_KEYS_VALUES, POST_ATTENTION,
                FFN_INTERMEDIATE, POST_FFN)

# Workspace category for each slot kind (typology property of the
# surrounding architecture region).
SLOT_WORKSPACE = {
    EMBEDDING_OUTPUT: "embedding-layer",
    ATTN_QV_WEIGHTS: "attention-queries-values",
    ATTN_KEYS_VALUES: "attention-keys-values",
    POST_ATTENTION: "attention-layer",
    FFN_INTERMEDIATE: "ffn-intermediate",
    POST_FFN: "ffn-layer",
}


def embedding_output() -> SlotId:
    return SlotId(EMBEDDING_OUTPUT, None)


def attn_qv_weights(layer: int) -> SlotId:
    return SlotId(ATTN_QV_WEIGHTS, layer)


def attn_keys_values(layer: int) -> SlotId:
    return SlotId(ATTN_KEYS_VALUES, layer)


def post_attention(layer: int) -> SlotId:
    return SlotId(POST_ATTENTION, layer)


def ffn_intermediate(layer: int) -> SlotId:
    return SlotId(FFN_INTERMEDIATE, layer)


def post_ffn(layer: int) -> SlotId:
    return SlotId(POST_FFN, layer)


def validate_slot(slot: SlotId, num_layers: int) -> None:
    if slot.kind == EMBEDDING_OUTPUT:
        if slot.layer is not None:
            raise ConfigError(f"{EMBEDDING_OUTPUT} carries no layer index")
        return
    if slot.kind not in _LAYER_KINDS:
        raise ConfigError(f"unknown slot kind {slot.kind!r}")
    if slot.layer is None or not (0 <= slot.layer < num_layers):
        raise ConfigError(
            f"slot {slot.kind} layer {slot.layer} outside [0, {num_layers})"
        )


Hook = Callable[..., object]


# ----------------------------------------------------------------- trace

@dataclass
class LayerTrace:
    residual_in: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    attn_probs: list[Tensor]  # per head, (Tq, Tk)
    attn_out: Tensor          # after output projection, before residual
    post_attention: Tensor    # attention block output, hooks applied
    ffn_intermediate: Tensor  # hooks applied
    ffn_out: Tensor           # before residual
    post_ffn: Tensor          # block output, hooks applied


@dataclass
class SeqTrace:
    embedding: Tensor           # after embedding hook, before positions
    embedding_with_pos: Tensor
    layers: list[LayerTrace]
    final_hidden: Tensor
    logits: Tensor


@dataclass
class ForwardTrace:
    """Captured per-sequence values; entries are indexed [batch][layer]."""

    seqs: list[SeqTrace] = field(default_factory=list)
    hooked_slots: set = field(default_factory=set)


# ------------------------------------------------------------ base model

_LAYER_PARAMS = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
                 "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


class BaseModel:
    """Frozen transformer; immutable after construction."""

    def __init__(self, config: BaseConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._attached = None  # single-module composition policy

    def param_count(self) -> int:
        return sum(t.numel for t in self.params.values())

    def trainable_count(self) -> int:
        return sum(t.numel for t in self.params.values() if t.requires_grad)

    def layer_param(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers.{layer}.{name}"]

    def forward(self, tokens, hooks=None):
        return forward_with_hooks(self, tokens, hooks or {})


def build_base(config: BaseConfig, seed: int) -> BaseModel:
    """Construct the frozen base with scaled-uniform init (+-1/sqrt(fan_in))."""
    rng = random.Random(f"base:{seed}")
    d = config.model_dim
    f = config.ffn_dim
    inv_d = 1.0 / math.sqrt(d)
    inv_f = 1.0 / math.sqrt(f)

    p: dict[str, Tensor] = {}
    p["tok_emb"] = tt.uniform((config.vocab_size, d), rng, inv_d)
    p["pos_emb"] = tt.uniform((config.max_seq_len, d), rng, inv_d)
    for l in range(config.num_layers):
        pref = f"layers.{l}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pref + name] = tt.uniform((d, d), rng, inv_d)
        for name in ("bq", "bk", "bv", "bo"):
            p[pref + name] = tt.zeros((d,))
        p[pref + "ln1_g"] = tt.full((d,), 1.0)
        p[pref + "ln1_b"] = tt.zeros((d,))
        p[pref + "w1"] = tt.uniform((d, f), rng, inv_d)
        p[pref + "b1"] = tt.zeros((f,))
        p[pref + "w2"] = tt.uniform((f, d), rng, inv_f)
        p[pref + "b2"] = tt.zeros((d,))
        p[pref + "ln2_g"] = tt.full((d,), 1.0)
        p[pref + "ln2_b"] = tt.zeros((d,))
    p["out_w"] = tt.uniform((d, config.vocab_size), rng, inv_d)
    p["out_b"] = tt.zeros((config.vocab_size,))
    return BaseModel(config, p)


# -------------------------------------------------------------- attention

@lru_cache(maxsize=256)
def _causal_mask(tq: int, tk: int) -> Tensor:
    """Additive mask: query i sees key j iff j is a prefix column
    (j < tk - tq) or its real index is <= i."""
    extra = tk - tq
    m = Tensor((tq, tk))
    for i in range(tq):
        for j in range(tk):
            if j >= extra and (j - extra) > i:
                m.data[i * tk + j] = MASK_NEG
    return m


def scaled_attention(q: Tensor, k: Tensor, v: Tensor,
                     causal: bool) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product attention. Returns (mix, probs)."""
    tq, dk = q.shape
    tk = k.shape[0]
    scores = tt.scale(tt.matmul(q, tt.transpose(k)), 1.0 / math.sqrt(dk))
    if causal:
        scores = tt.add(scores, _causal_mask(tq, tk))
    probs = tt.softmax(scores)
    return tt.matmul(probs, v), probs


# ---------------------------------------------------------------- hooks

def _apply_hook(hooks, slot: SlotId, trace: ForwardTrace, value: Tensor,
                rows: int, cols: int, allow_row_growth: bool = False) -> Tensor:
    fn = hooks.get(slot)
    if fn is None:
        return value
    trace.hooked_slots.add(slot)
    return _expect_matrix(slot, fn(value), rows, cols, allow_row_growth)


def _expect_matrix(slot: SlotId, value, rows, cols, allow_row_growth=False):
    if not isinstance(value, Tensor) or len(value.shape) != 2:
        raise SlotContractError(f"hook at {slot} must return a matrix")
    r, c = value.shape
    if c != cols:
        raise SlotContractError(
            f"hook at {slot} changed width: expected {cols} columns, got {c}"
        )
    if allow_row_growth:
        if r < rows:
            raise SlotContractError(
                f"hook at {slot} shrank rows: {rows} -> {r}"
            )
    elif r != rows:
        raise SlotContractError(
            f"hook at {slot} changed shape: expected ({rows}, {cols}), "
            f"got ({r}, {c})"
        )
    return value


# --------------------------------------------------------------- forward

def forward_with_hooks(model: BaseModel, tokens, hooks):
    """Run the (possibly hooked) forward pass.

    ``tokens`` is one sequence of token ids or a batch of them. Returns
    ``(logits, trace)`` where ``logits`` is a list of (T_i', vocab)
    tensors, one per sequence, and the trace captures values after hook
    application.
    """
    cfg = model.config
    if tokens and isinstance(tokens[0], int):
        tokens = [tokens]
    for slot in hooks:
        validate_slot(slot, cfg.num_layers)

    trace = ForwardTrace()
    logits_out = []
    for seq in tokens:
        logits, seq_trace = _forward_seq(model, list(seq), hooks, trace)
        trace.seqs.append(seq_trace)
        logits_out.append(logits)
    return logits_out, trace


def _forward_seq(model: BaseModel, ids: list[int], hooks, trace: ForwardTrace):
    cfg = model.config
    p = model.params
    d = cfg.model_dim
    heads = cfg.num_heads
    dk = d // heads

    for i in ids:
        if not (0 <= i < cfg.vocab_size):
            raise ConfigError(f"token id {i} outside vocab [0, {cfg.vocab_size})")

    x = tt.gather(p["tok_emb"], ids)
    x = _apply_hook(hooks, embedding_output(), trace, x,
                    len(ids), d, allow_row_growth=True)
    emb = x
    t_full = x.shape[0]
    if t_full > cfg.max_seq_len:
        raise ConfigError(
            f"sequence length {t_full} exceeds max_seq_len {cfg.max_seq_len}"
        )
    x = tt.add(x, tt.slice_rows(p["pos_emb"], 0, t_full))
    emb_pos = x

    layer_traces = []
    for l in range(cfg.num_layers):
        x, ltrace = _layer_forward(model, x, l, hooks, trace, heads, dk)
        layer_traces.append(ltrace)

    logits = tt.row_add(tt.matmul(x, p["out_w"]), p["out_b"])
    seq_trace = SeqTrace(embedding=emb, embedding_with_pos=emb_pos,
                         layers=layer_traces, final_hidden=x, logits=logits)
    return logits, seq_trace


def _layer_forward(model, x, l, hooks, trace, heads, dk):
    cfg = model.config
    d = cfg.model_dim
    residual_in = x
    pm = model.layer_param

    def attention_block(inp):
        tq = inp.shape[0]
        q = tt.row_add(tt.matmul(inp, pm(l, "wq")), pm(l, "bq"))
        k = tt.row_add(tt.matmul(inp, pm(l, "wk")), pm(l, "bk"))
        v = tt.row_add(tt.matmul(inp, pm(l, "wv")), pm(l, "bv"))

        slot = attn_qv_weights(l)
        fn = hooks.get(slot)
        if fn is not None:
            trace.hooked_slots.add(slot)
            out = fn(inp, q, v)
            if not (isinstance(out, tuple) and len(out) == 2):
                raise SlotContractError(f"hook at {slot} must return (q, v)")
            q = _expect_matrix(slot, out[0], tq, d)
            v = _expect_matrix(slot, out[1], tq, d)

        slot = attn_keys_values(l)
        fn = hooks.get(slot)
        if fn is not None:
            trace.hooked_slots.add(slot)
            out = fn(k, v)
            if not (isinstance(out, tuple) and len(out) == 2):
                raise SlotContractError(f"hook at {slot} must return (k, v)")
            k = _expect_matrix(slot, out[0], k.shape[0], d, allow_row_growth=True)
            v = _expect_matrix(slot, out[1], k.shape[0], d)

        mixes = []
        probs = []
        for h in range(heads):
            qh = tt.slice_cols(q, h * dk, (h + 1) * dk)
            kh = tt.slice_cols(k, h * dk, (h + 1) * dk)
            vh = tt.slice_cols(v, h * dk, (h + 1) * dk)
            mix, pr = scaled_attention(qh, kh, vh, cfg.causal)
            mixes.append(mix)
            probs.append(pr)
        mixed = mixes[0] if heads == 1 else tt.concat(mixes, axis=1)
        attn = tt.row_add(tt.matmul(mixed, pm(l, "wo")), pm(l, "bo"))
        return attn, q, k, v, probs

    def ffn_block(inp):
        a = tt.relu(tt.row_add(tt.matmul(inp, pm(l, "w1")), pm(l, "b1")))
        a = _apply_hook(hooks, ffn_intermediate(l), trace, a,
                        inp.shape[0], cfg.ffn_dim)
        return tt.row_add(tt.matmul(a, pm(l, "w2")), pm(l, "b2")), a

    t = x.shape[0]
    if cfg.pre_norm:
        attn, q, k, v, probs = attention_block(
            tt.layer_norm(x, pm(l, "ln1_g"), pm(l, "ln1_b")))
        h = tt.add(x, attn)
    else:
        attn, q, k, v, probs = attention_block(x)
        h = tt.layer_norm(tt.add(x, attn), pm(l, "ln1_g"), pm(l, "ln1_b"))
    h = _apply_hook(hooks, post_attention(l), trace, h, t, d)

    if cfg.pre_norm:
        f, a = ffn_block(tt.layer_norm(h, pm(l, "ln2_g"), pm(l, "ln2_b")))
        out = tt.add(h, f)
    else:
        f, a = ffn_block(h)
        out = tt.layer_norm(tt.add(h, f), pm(l, "ln2_g"), pm(l, "ln2_b"))
    out = _apply_hook(hooks, post_ffn(l), trace, out, t, d)

    ltrace = LayerTrace(residual_in=residual_in, q=q, k=k, v=v,
                        attn_probs=probs, attn_out=attn, post_attention=h,
                        ffn_intermediate=a, ffn_out=f, post_ffn=out)
    return out, ltrace


def residual_flow_view(trace: ForwardTrace, layer: int) -> list[Tensor]:
    """Running residual-stream value entering ``layer``, per sequence."""
    if not trace.seqs:
        raise IndexError("empty trace")
    depth = len(trace.seqs[0].layers)
    if not (0 <= layer < depth):
        raise IndexError(f"layer {layer} outside [0, {depth})")
    return [s.layers[layer].residual_in for s in trace.seqs]


def base_param_bytes(model: BaseModel) -> bytes:
    """Concatenated raw parameter bytes in name order (for hashing)."""
    chunks = []
    for name in sorted(model.params):
        chunks.append(name.encode())
        chunks.append(model.params[name].tobytes())
    return b"".join(chunks)
