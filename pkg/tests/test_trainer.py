"""Training harness: tasks, runs, determinism, sweeps."""

import pytest

from peftkit import peft
from peftkit.errors import ConfigError
from peftkit.peft import PeftHyperparams, attach
from peftkit.trainer import (
    FullFinetune,
    TaskSpec,
    TrainConfig,
    accuracy,
    convergence_sweep,
    make_task,
    run_csv,
    stability_csv,
    stability_report,
    sweep_curves_csv,
    sweep_summary_csv,
    technique_hyper,
    train,
)
from peftkit.transformer import BaseConfig, build_base

CFG = BaseConfig(num_layers=2, model_dim=16, num_heads=2, vocab_size=8)
TASK = TaskSpec(kind="sequence-copy", vocab_size=8, seq_len=4, dataset_size=8,
                seed=0)


def make_composed(technique="lora", seed=0, base_seed=0):
    base = build_base(CFG, base_seed)
    module = peft.build(technique, technique_hyper(technique, seed), CFG)
    return attach(base, module)


class TestTasks:
    def test_copy_targets_equal_inputs(self):
        task = make_task(TaskSpec(kind="sequence-copy", seq_len=6))
        for s in task.samples:
            assert s.targets == s.ids

    def test_same_spec_identical(self):
        a = make_task(TASK)
        b = make_task(TASK)
        assert a == b

    def test_different_seed_differs(self):
        a = make_task(TASK)
        b = make_task(TaskSpec(kind="sequence-copy", vocab_size=8, seq_len=4,
                               dataset_size=8, seed=1))
        assert a != b

    def test_parity_single_trailing_label(self):
        task = make_task(TaskSpec(kind="parity", seq_len=5))
        for s in task.samples:
            assert len(s.targets) == 1 and s.targets[0] in (0, 1)

    def test_parity_labels_balanced(self):
        task = make_task(TaskSpec(kind="parity", vocab_size=8, seq_len=6,
                                  dataset_size=512, seed=3))
        ones = sum(s.targets[0] for s in task.samples)
        assert abs(ones / 512 - 0.5) <= 0.10

    def test_token_classification_marks_upper_half(self):
        task = make_task(TaskSpec(kind="token-classification", vocab_size=8,
                                  seq_len=4))
        for s in task.samples:
            assert s.targets == tuple(1 if t >= 4 else 0 for t in s.ids)

    def test_small_vocab_rejected(self):
        with pytest.raises(ConfigError):
            TaskSpec(kind="parity", vocab_size=1)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            TaskSpec(kind="sorting")


class TestTrain:
    def test_loss_halves_within_100_steps_for_lora(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=100, batch_size=8, learning_rate=0.02, seed=0)
        record = train(make_composed("lora"), task, cfg)
        assert not record.aborted
        assert len(record.losses) == 100
        assert record.final_loss < 0.5 * record.initial_loss

    def test_base_hash_unchanged(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=25, batch_size=8, learning_rate=0.05, seed=0)
        record = train(make_composed("adapters"), task, cfg)
        assert record.base_frozen

    def test_zero_learning_rate_flat_loss(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=10, batch_size=8, learning_rate=0.0, seed=0)
        record = train(make_composed("lora"), task, cfg)
        spread = max(record.losses) - min(record.losses)
        assert spread <= 1e-12

    def test_runs_reproducible_bitwise(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=30, batch_size=4, learning_rate=0.02, seed=5)
        a = train(make_composed("ia3", seed=5), task, cfg)
        b = train(make_composed("ia3", seed=5), task, cfg)
        assert a.losses == b.losses
        assert a.module_hash == b.module_hash

    def test_eval_every_records_accuracy(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=20, batch_size=8, learning_rate=0.02, seed=0,
                          eval_every=10)
        record = train(make_composed("lora"), task, cfg)
        assert [step for step, _ in record.evals] == [10, 20]
        for _, acc in record.evals:
            assert 0.0 <= acc <= 1.0

    def test_two_modules_train_independently(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=40, batch_size=8, learning_rate=0.02, seed=0)
        a = train(make_composed("lora", seed=0), task, cfg)
        b = train(make_composed("adapters", seed=0), task, cfg)
        assert a.final_loss != b.final_loss
        assert a.base_hash_before == b.base_hash_before  # same frozen base

    def test_full_finetune_control_trains(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=30, batch_size=8, learning_rate=0.02, seed=0)
        record = train(FullFinetune(CFG, seed=0), task, cfg)
        assert record.final_loss < record.initial_loss
        assert not record.base_frozen  # the control really updates the base


class TestAccuracy:
    def test_perfect_model_scores_one(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=400, batch_size=8, learning_rate=0.02, seed=0)
        composed = make_composed("adapters")
        train(composed, task, cfg)
        assert accuracy(composed, task) == 1.0


class TestSweeps:
    def test_cardinality_and_determinism(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=12, batch_size=8, learning_rate=0.02)
        result = convergence_sweep(CFG, 0, ["lora", "ia3"], task, cfg,
                                   seeds=[0, 1, 2])
        assert len(result.curves) == 6
        assert len(result.summaries) == 2
        again = convergence_sweep(CFG, 0, ["lora", "ia3"], task, cfg,
                                  seeds=[0, 1, 2])
        assert sweep_curves_csv(result) == sweep_curves_csv(again)
        for s in result.summaries:
            assert s.final_std >= 0.0

    def test_requires_seeds(self):
        task = make_task(TASK)
        with pytest.raises(ConfigError):
            convergence_sweep(CFG, 0, ["lora"], task, TrainConfig(steps=2), [])

    def test_full_finetune_comparison_point(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=8, batch_size=8, learning_rate=0.02)
        result = convergence_sweep(CFG, 0, ["lora", "full-finetune"], task,
                                   cfg, seeds=[0])
        record = result.curves[("full-finetune", 0)]
        assert record.final_loss < record.initial_loss
        assert not record.base_frozen
        assert result.curves[("lora", 0)].base_frozen

    def test_stability_report_rows(self):
        from peftkit.analyzer import empirical_param_count

        task = make_task(TASK)
        cfg = TrainConfig(steps=12, batch_size=8, learning_rate=0.02)
        budgets = [("r=1", PeftHyperparams(bottleneck_dim=1)),
                   ("r=4", PeftHyperparams(bottleneck_dim=4))]
        rows = stability_report("lora", budgets, CFG, 0, task, cfg,
                                seeds=[0, 1, 2, 4, 5])
        assert [r.budget for r in rows] == ["r=1", "r=4"]
        for row, (_, hyper) in zip(rows, budgets):
            module = peft.build("lora", hyper, CFG)
            assert row.param_count == empirical_param_count(module).total
            assert row.final_std >= 0.0

    def test_stability_requires_two_budgets_and_seeds(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=2)
        with pytest.raises(ConfigError):
            stability_report("lora", [("a", PeftHyperparams())], CFG, 0, task,
                             cfg, seeds=[0, 1])
        with pytest.raises(ConfigError):
            stability_report("lora",
                             [("a", PeftHyperparams()),
                              ("b", PeftHyperparams(bottleneck_dim=4))],
                             CFG, 0, task, cfg, seeds=[0])


class TestCsv:
    def test_run_csv_carries_config_header(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=5, batch_size=8, learning_rate=0.02, seed=9)
        record = train(make_composed("lora", seed=9), task, cfg)
        text = run_csv(record)
        assert "# seed=9" in text
        assert "# technique=lora" in text
        assert text.count("\n") == 5 + 1 + len(
            [l for l in text.splitlines() if l.startswith("#")])

    def test_csv_outputs_deterministic(self):
        task = make_task(TASK)
        cfg = TrainConfig(steps=6, batch_size=8, learning_rate=0.02)
        r1 = convergence_sweep(CFG, 0, ["lora"], task, cfg, seeds=[0, 1])
        r2 = convergence_sweep(CFG, 0, ["lora"], task, cfg, seeds=[0, 1])
        assert sweep_summary_csv(r1).encode() == sweep_summary_csv(r2).encode()

        budgets = [("r=1", PeftHyperparams(bottleneck_dim=1)),
                   ("r=2", PeftHyperparams(bottleneck_dim=2))]
        s1 = stability_report("lora", budgets, CFG, 0, task, cfg, [0, 1])
        s2 = stability_report("lora", budgets, CFG, 0, task, cfg, [0, 1])
        assert stability_csv(s1).encode() == stability_csv(s2).encode()
