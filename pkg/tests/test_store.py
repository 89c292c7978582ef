"""Checkpoint container: round-trips, integrity, compatibility, sizes."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftkit import peft, store
from peftkit.errors import CompatibilityError, IntegrityError
from peftkit.peft import PeftHyperparams, attach, detach, prefix_export_final
from peftkit.transformer import BaseConfig, build_base

CFG = BaseConfig(num_layers=2, model_dim=16, num_heads=2, vocab_size=32)


def randomize(module, seed):
    rng = random.Random(seed)
    for p in module.trainable_tensors():
        for i in range(p.tensor.numel):
            p.tensor.data[i] = rng.uniform(-1, 1)


def rand_tokens(rng, n, vocab=32):
    return [rng.randrange(vocab) for _ in range(n)]


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["prompt-tuning", "prefix-tuning", "lora",
                                      "adapters", "tiny-attention-adapters",
                                      "compacter", "ia3"])
    def test_tensors_bit_identical(self, name, tmp_path):
        module = peft.build(name, PeftHyperparams(), CFG)
        randomize(module, seed=name)
        path = tmp_path / "m.pfr"
        written = store.save_peft(module, path)
        assert written == path.stat().st_size
        ckpt = store.load_checkpoint(path)
        for p in module.trainable_tensors():
            assert ckpt.tensors[p.name].tobytes() == p.tensor.tobytes()

    def test_size_formula_matches_file_exactly(self, tmp_path):
        module = peft.lora_build(PeftHyperparams(), CFG)
        path = tmp_path / "m.pfr"
        written = store.save_peft(module, path)
        assert store.peft_checkpoint_size(module) == written == path.stat().st_size

    def test_base_roundtrip_bit_identical(self, tmp_path):
        model = build_base(CFG, seed=3)
        path = tmp_path / "base.pfr"
        store.save_base(model, path)
        loaded = store.load_base(path)
        assert store.base_hash(loaded) == store.base_hash(model)
        ids = rand_tokens(random.Random(0), 6)
        a, _ = model.forward([ids])
        b, _ = loaded.forward([ids])
        assert a[0].tobytes() == b[0].tobytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                          width=64), min_size=1, max_size=64),
       st.integers(min_value=0, max_value=10**6))
def test_serialized_values_roundtrip_bit_exact(values, seed):
    # arbitrary finite float64 payloads survive the container unchanged
    module = peft.ia3_build(PeftHyperparams(seed=seed), CFG)
    target = module.vectors[0]["ffn"]
    for i, v in enumerate(values[:target.numel]):
        target.data[i] = v
    blob = store.serialize_peft(module)
    ckpt = store.deserialize(blob)
    assert ckpt.tensors["layers.0.rescale.ffn"].tobytes() == target.tobytes()


class TestIntegrity:
    def test_corrupted_checksum_refused(self, tmp_path):
        module = peft.ia3_build(PeftHyperparams(), CFG)
        path = tmp_path / "m.pfr"
        store.save_peft(module, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            store.load_checkpoint(path)

    def test_bad_magic_refused(self, tmp_path):
        path = tmp_path / "m.pfr"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(IntegrityError):
            store.load_checkpoint(path)

    def test_truncated_refused(self, tmp_path):
        module = peft.ia3_build(PeftHyperparams(), CFG)
        path = tmp_path / "m.pfr"
        store.save_peft(module, path)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(IntegrityError):
            store.load_checkpoint(path)


class TestCompatibility:
    def test_fingerprint_mismatch_names_both_configs(self, tmp_path):
        other = BaseConfig(num_layers=2, model_dim=32, num_heads=2,
                           vocab_size=32)
        module = peft.lora_build(PeftHyperparams(), other)
        path = tmp_path / "m.pfr"
        store.save_peft(module, path)
        base = build_base(CFG, seed=1)
        with pytest.raises(CompatibilityError) as e:
            store.load_and_attach(base, path)
        msg = str(e.value)
        assert "model_dim=32" in msg and "model_dim=16" in msg

    def test_base_checkpoint_not_attachable(self, tmp_path):
        model = build_base(CFG, seed=1)
        path = tmp_path / "base.pfr"
        store.save_base(model, path)
        with pytest.raises(CompatibilityError):
            store.load_and_attach(model, path)

    def test_unknown_technique_surfaces_lookup_error(self, tmp_path):
        from peftkit.errors import TechniqueLookupError
        from peftkit.peft import full_copy_control

        model = build_base(CFG, seed=1)
        path = tmp_path / "ctl.pfr"
        store.save_peft(full_copy_control(model), path)  # saving is fine
        with pytest.raises(TechniqueLookupError):
            store.load_and_attach(model, path)  # not a known module structure

    def test_bias_adapter_roundtrips_through_hyperparams(self, tmp_path):
        module = peft.adapter_build(
            PeftHyperparams(bottleneck_dim=4, adapter_bias=True), CFG)
        randomize(module, seed="bias-adapter")
        path = tmp_path / "bias.pfr"
        store.save_peft(module, path)
        rebuilt = store.rebuild_module(store.load_checkpoint(path))
        assert rebuilt.with_bias
        got = {p.name: p.tensor.tobytes() for p in rebuilt.trainable_tensors()}
        want = {p.name: p.tensor.tobytes() for p in module.trainable_tensors()}
        assert got == want


class TestAttachBehavior:
    @pytest.mark.parametrize("name", ["prompt-tuning", "lora", "adapters",
                                      "tiny-attention-adapters", "compacter",
                                      "ia3"])
    def test_reload_reproduces_logits(self, name, tmp_path):
        base = build_base(CFG, seed=2)
        module = peft.build(name, PeftHyperparams(), CFG)
        randomize(module, seed=f"attach:{name}")
        ids = rand_tokens(random.Random(1), 6)
        composed = attach(base, module)
        want, _ = composed.forward([ids])
        path = tmp_path / "m.pfr"
        store.save_peft(module, path)
        detach(composed)

        fresh_base = build_base(CFG, seed=2)
        reloaded = store.load_and_attach(fresh_base, path)
        got, _ = reloaded.forward([ids])
        assert want[0].tobytes() == got[0].tobytes()

    def test_two_checkpoints_alternate_on_one_base(self, tmp_path):
        base = build_base(CFG, seed=4)
        ids = rand_tokens(random.Random(2), 6)
        paths, want = [], []
        for i, name in enumerate(["lora", "ia3"]):
            module = peft.build(name, PeftHyperparams(), CFG)
            randomize(module, seed=f"alt:{i}")
            composed = attach(base, module)
            out, _ = composed.forward([ids])
            want.append(out[0].tobytes())
            p = tmp_path / f"task{i}.pfr"
            store.save_peft(module, p)
            paths.append(p)
            detach(composed)
        for p, expected in zip(paths, want):
            composed = store.load_and_attach(base, p)
            got, _ = composed.forward([ids])
            assert got[0].tobytes() == expected
            detach(composed)


class TestPrefixExport:
    def test_exported_strictly_smaller_and_equivalent(self, tmp_path):
        module = peft.prefix_tuning_build(
            PeftHyperparams(n_virtual_tokens=4, bottleneck_dim=16), CFG)
        randomize(module, seed="prefix-export")
        full_path = tmp_path / "full.pfr"
        exported = prefix_export_final(module)
        export_path = tmp_path / "export.pfr"
        full_bytes = store.save_peft(module, full_path)
        export_bytes = store.save_peft(exported, export_path)
        assert export_bytes < full_bytes

        base = build_base(CFG, seed=5)
        ids = rand_tokens(random.Random(3), 5)
        want, _ = attach(base, module).forward([ids])
        detach(peft.ComposedModel(base, module))
        composed = store.load_and_attach(base, export_path)
        got, _ = composed.forward([ids])
        assert want[0].tobytes() == got[0].tobytes()
