"""Structural typology of PEFT techniques, as validated data.

Nine properties characterize how a technique's module is built and how
it collaborates with the frozen base model. The registry preloads one
descriptor per supported technique; modules self-describe and are
checked field by field against their registry row.

The registry serializes to a line-oriented text file (one technique per
record, ``field=value;`` pairs, set values sorted and joined with
``|``), meant to be read and diffed by humans.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from types import MappingProxyType

from peftkit.errors import ConfigError, TechniqueLookupError

INTRA_CONNECTIVITY = frozenset({
    "dense:embedding", "dense:nonlinear-mlp", "dense:linear-mlp",
    "dense:self-attention", "none:parameter-vector", "sparse",
})
INTER_CONNECTIVITY = frozenset({"fixed:dense", "fixed:sparse", "dynamic"})
PARAMETERS_ADAPTED = frozenset({"addition", "reparameterisation"})
PARAMETER_SHARING = frozenset({"shared", "tied", "none"})
INPUT_TYPE = frozenset({"hidden", "data", "weights"})
INSERTION_FORM = frozenset({"sequential", "parallel"})
INSERTIONS = frozenset({"one-layer", "all-layers"})
INTEGRATION_FORMS = frozenset({
    "concatenation", "scaled-addition", "direct-addition",
    "gated-addition", "rescaling",
})
WORKSPACES = frozenset({
    "embedding-layer", "attention-keys-values", "attention-queries-values",
    "attention-layer", "ffn-layer", "ffn-intermediate",
})

_FIELD_DOMAINS = {
    "intra_connectivity": INTRA_CONNECTIVITY,
    "inter_connectivity": INTER_CONNECTIVITY,
    "parameters_adapted": PARAMETERS_ADAPTED,
    "parameter_sharing": PARAMETER_SHARING,
    "input_type": INPUT_TYPE,
    "insertion_form": INSERTION_FORM,
    "insertions": INSERTIONS,
}
_SET_FIELDS = {"integration_form": INTEGRATION_FORMS, "workspace": WORKSPACES}


@dataclass(frozen=True)
class PeftDescriptor:
    """The nine structural properties of one PEFT technique."""

    intra_connectivity: str
    inter_connectivity: str
    parameters_adapted: str
    parameter_sharing: str
    input_type: str
    insertion_form: str
    insertions: str
    integration_form: frozenset
    workspace: frozenset

    def __post_init__(self):
        for name, domain in _FIELD_DOMAINS.items():
            v = getattr(self, name)
            if v not in domain:
                raise ConfigError(
                    f"descriptor field {name}={v!r} not in {sorted(domain)}"
                )
        for name, domain in _SET_FIELDS.items():
            v = frozenset(getattr(self, name))
            object.__setattr__(self, name, v)
            if not v:
                raise ConfigError(f"descriptor field {name} must be non-empty")
            bad = v - domain
            if bad:
                raise ConfigError(
                    f"descriptor field {name} has unknown values {sorted(bad)}"
                )

    def field_names(self) -> list[str]:
        return [f.name for f in fields(self)]


@dataclass(frozen=True)
class Mismatch:
    field: str
    got: object
    expected: object

    def __str__(self):
        return f"{self.field}: got {_fmt(self.got)}, expected {_fmt(self.expected)}"


def _fmt(v):
    if isinstance(v, frozenset):
        return "|".join(sorted(v))
    return str(v)


# ----------------------------------------------------------- the registry

TECHNIQUES = (
    "prompt-tuning",
    "prefix-tuning",
    "lora",
    "adapters",
    "tiny-attention-adapters",
    "compacter",
    "ia3",
)

REGISTRY = MappingProxyType({
    "prompt-tuning": PeftDescriptor(
        intra_connectivity="dense:embedding",
        inter_connectivity="fixed:dense",
        parameters_adapted="addition",
        parameter_sharing="none",
        input_type="weights",
        insertion_form="parallel",
        insertions="one-layer",
        integration_form=frozenset({"concatenation"}),
        workspace=frozenset({"embedding-layer"}),
    ),
    "prefix-tuning": PeftDescriptor(
        intra_connectivity="dense:nonlinear-mlp",
        inter_connectivity="fixed:dense",
        parameters_adapted="addition",
        parameter_sharing="none",
        input_type="weights",
        insertion_form="parallel",
        insertions="all-layers",
        integration_form=frozenset({"gated-addition"}),
        workspace=frozenset({"embedding-layer", "attention-keys-values"}),
    ),
    "lora": PeftDescriptor(
        intra_connectivity="dense:linear-mlp",
        inter_connectivity="fixed:dense",
        parameters_adapted="reparameterisation",
        parameter_sharing="none",
        input_type="data",
        insertion_form="parallel",
        insertions="all-layers",
        integration_form=frozenset({"scaled-addition"}),
        workspace=frozenset({"attention-queries-values"}),
    ),
    "adapters": PeftDescriptor(
        intra_connectivity="dense:nonlinear-mlp",
        inter_connectivity="fixed:dense",
        parameters_adapted="addition",
        parameter_sharing="none",
        input_type="hidden",
        insertion_form="sequential",
        insertions="all-layers",
        integration_form=frozenset({"direct-addition"}),
        workspace=frozenset({"ffn-layer", "attention-layer"}),
    ),
    "tiny-attention-adapters": PeftDescriptor(
        intra_connectivity="dense:self-attention",
        inter_connectivity="dynamic",
        parameters_adapted="addition",
        parameter_sharing="none",
        input_type="hidden",
        insertion_form="sequential",
        insertions="all-layers",
        integration_form=frozenset({"direct-addition"}),
        workspace=frozenset({"attention-layer"}),
    ),
    # Stored with parameters_adapted="addition" to match the reference
    # table row, although the Kronecker factorization can equally be
    # read as a reparameterisation of the adapter weights.
    "compacter": PeftDescriptor(
        intra_connectivity="dense:nonlinear-mlp",
        inter_connectivity="fixed:dense",
        parameters_adapted="addition",
        parameter_sharing="shared",
        input_type="hidden",
        insertion_form="sequential",
        insertions="all-layers",
        integration_form=frozenset({"direct-addition"}),
        workspace=frozenset({"ffn-layer", "attention-layer"}),
    ),
    "ia3": PeftDescriptor(
        intra_connectivity="none:parameter-vector",
        inter_connectivity="fixed:dense",
        parameters_adapted="addition",
        parameter_sharing="none",
        input_type="weights",
        insertion_form="sequential",
        insertions="all-layers",
        integration_form=frozenset({"rescaling"}),
        workspace=frozenset({"ffn-intermediate", "attention-keys-values"}),
    ),
})

_ALIASES = {
    "prompttuning": "prompt-tuning",
    "prompt": "prompt-tuning",
    "pt": "prompt-tuning",
    "prefixtuning": "prefix-tuning",
    "prefix": "prefix-tuning",
    "pf": "prefix-tuning",
    "lora": "lora",
    "adapters": "adapters",
    "adapter": "adapters",
    "tinyattad": "tiny-attention-adapters",
    "tinyattentionadapters": "tiny-attention-adapters",
    "tinyattentionadapter": "tiny-attention-adapters",
    "tinyattention": "tiny-attention-adapters",
    "compacter": "compacter",
    "compacters": "compacter",
    "ia3": "ia3",
}


def canonical_name(technique: str) -> str:
    """Resolve display names and aliases to the canonical registry key."""
    key = "".join(ch for ch in technique.lower() if ch.isalnum())
    name = _ALIASES.get(key)
    if name is None:
        raise TechniqueLookupError(
            f"unknown technique {technique!r}; known: {', '.join(TECHNIQUES)}"
        )
    return name


def registry_lookup(technique: str) -> PeftDescriptor:
    return REGISTRY[canonical_name(technique)]


def validate_descriptor(module) -> list[Mismatch]:
    """Field-by-field comparison of a module's self-description against
    its registry row. Empty list means the module matches."""
    expected = registry_lookup(module.technique)
    got = module.descriptor()
    out = []
    for name in expected.field_names():
        e = getattr(expected, name)
        g = getattr(got, name)
        if g != e:
            out.append(Mismatch(field=name, got=g, expected=e))
    return out


def descriptor_diff(a: PeftDescriptor, b: PeftDescriptor) -> list[tuple]:
    """Symmetric per-field comparison; empty for identical descriptors."""
    out = []
    for name in a.field_names():
        va, vb = getattr(a, name), getattr(b, name)
        if va != vb:
            out.append((name, va, vb))
    return out


# -------------------------------------------------------- serialization

def descriptor_to_line(technique: str, d: PeftDescriptor) -> str:
    parts = [f"technique={technique}"]
    for name in d.field_names():
        v = getattr(d, name)
        if isinstance(v, frozenset):
            v = "|".join(sorted(v))
        parts.append(f"{name}={v}")
    return ";".join(parts)


def descriptor_from_line(line: str) -> tuple[str, PeftDescriptor]:
    kv = {}
    for part in line.strip().split(";"):
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"malformed registry record field {part!r}")
        k, v = part.split("=", 1)
        kv[k] = v
    technique = kv.pop("technique", None)
    if technique is None:
        raise ConfigError(f"registry record missing technique name: {line!r}")
    for name in _SET_FIELDS:
        if name in kv:
            kv[name] = frozenset(kv[name].split("|"))
    return technique, PeftDescriptor(**kv)


def save_registry(path, registry=REGISTRY) -> None:
    lines = [descriptor_to_line(name, registry[name]) for name in registry]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_registry(path) -> dict[str, PeftDescriptor]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, desc = descriptor_from_line(line)
            out[name] = desc
    return out
