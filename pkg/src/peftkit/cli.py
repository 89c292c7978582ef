"""Command-line surface.

Subcommands wrap the library's main operations for scripted use. Every
command is deterministic given its flags (seeds included), and every
output file starts with a resolved-config header sufficient to rerun
the command exactly.

Exit codes: 0 success, 1 usage, 2 configuration, 3 numerical failure,
4 I/O or checkpoint integrity.
"""

from __future__ import annotations

import argparse
import sys

from peftkit import analyzer, peft, store, trainer
from peftkit.errors import (
    CompatibilityError,
    CompositionError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    IntegrityError,
    PeftKitError,
    RankError,
    SlotContractError,
    TechniqueLookupError,
)
from peftkit.gradcheck import composed_gradcheck
from peftkit.peft import PeftHyperparams, attach, prefix_export_final
from peftkit.transformer import BaseConfig, build_base
from peftkit.typology import TECHNIQUES, validate_descriptor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_base_flags(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn", type=int, default=None)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--pre-norm", action="store_true")


def _add_technique_flags(p, multiple=False):
    if multiple:
        p.add_argument("--technique", action="append", default=None,
                       help="repeatable; default: all seven")
    else:
        p.add_argument("--technique", required=True)
    p.add_argument("--n-tokens", type=int, default=4)
    p.add_argument("--bottleneck", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--kron-order", type=int, default=2)
    p.add_argument("--tiny-dim", type=int, default=1)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--module-seed", type=int, default=0)


def _add_run_flags(p):
    p.add_argument("--task", default="sequence-copy",
                   choices=list(trainer.TASK_KINDS))
    p.add_argument("--task-vocab", type=int, default=None,
                   help="defaults to the base vocab")
    p.add_argument("--seq-len", type=int, default=4)
    p.add_argument("--dataset-size", type=int, default=8)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--seeds", default="0",
                   help="comma-separated run seeds")
    p.add_argument("--out", default=None)


def _base_config(args) -> BaseConfig:
    return BaseConfig(
        num_layers=args.layers,
        model_dim=args.dim,
        num_heads=args.heads,
        vocab_size=args.vocab,
        ffn_dim=args.ffn,
        max_seq_len=args.max_seq,
        causal=not args.bidirectional,
        pre_norm=args.pre_norm,
    )


def _hyper(args, seed=None) -> PeftHyperparams:
    bottleneck = args.bottleneck
    if args.rank is not None:
        bottleneck = args.rank
    return PeftHyperparams(
        n_virtual_tokens=args.n_tokens,
        bottleneck_dim=bottleneck,
        kron_order=args.kron_order,
        tiny_dim=args.tiny_dim,
        lora_scale=args.scale,
        seed=args.module_seed if seed is None else seed,
    )


def _flag_echo(args) -> dict:
    # output destinations do not affect the computation and would break
    # byte-identity across reruns targeting different paths
    skip = {"func", "out", "summary_out", "save_module"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip or callable(v):
            continue
        out[k.replace("_", "-")] = v
    return out


def _header(args) -> str:
    echo = _flag_echo(args)
    return "".join(f"# {k}={echo[k]}\n" for k in sorted(echo))


def _emit(args, text: str) -> None:
    payload = _header(args) + text
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)


def _techniques(args) -> list[str]:
    return list(args.technique) if args.technique else list(TECHNIQUES)


# ------------------------------------------------------------- commands

def cmd_init_base(args) -> int:
    config = _base_config(args)
    model = build_base(config, args.seed)
    written = store.save_base(model, args.out)
    print(f"base parameters: {model.param_count()}")
    print(f"config fingerprint: {store.config_fingerprint(config):#018x}")
    print(f"wrote {written} bytes to {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = _base_config(args)
    hyper = PeftHyperparams(n_virtual_tokens=args.n_tokens,
                            bottleneck_dim=args.bottleneck,
                            kron_order=args.kron_order,
                            tiny_dim=args.tiny_dim,
                            lora_scale=args.scale)
    reports = analyzer.comparison_report(_techniques(args), config, hyper,
                                         lora_rank=args.rank)
    text = (analyzer.render_text(reports) if args.format == "text"
            else analyzer.render_csv(reports))
    _emit(args, text)
    if args.timing:
        # wall-clock diagnostics go to stderr: report files stay
        # byte-identical across reruns
        model = build_base(config, args.seed)
        for technique in _techniques(args):
            probe = analyzer.timing_probe(technique, model, hyper,
                                          lora_rank=args.rank)
            print(f"timing {technique}: base {probe['base_seconds'] * 1e3:.2f} ms, "
                  f"composed {probe['composed_seconds'] * 1e3:.2f} ms",
                  file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _base_config(args)
    task = trainer.make_task(trainer.TaskSpec(
        kind=args.task, vocab_size=args.task_vocab or args.vocab,
        seq_len=args.seq_len, dataset_size=args.dataset_size,
        seed=args.task_seed))
    seed = int(args.seeds.split(",")[0])
    base = build_base(config, args.seed)
    module = peft.build(args.technique, _hyper(args, seed=seed), config)
    composed = attach(base, module)
    cfg = trainer.TrainConfig(steps=args.steps, batch_size=args.batch,
                              learning_rate=args.lr, seed=seed,
                              eval_every=args.eval_every)
    record = trainer.train(composed, task, cfg)
    if args.save_module:
        store.save_peft(module, args.save_module)
    _emit(args, trainer.run_csv(record))
    if record.aborted:
        print(f"run aborted: {record.abort_reason}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _base_config(args)
    task = trainer.make_task(trainer.TaskSpec(
        kind=args.task, vocab_size=args.task_vocab or args.vocab,
        seq_len=args.seq_len, dataset_size=args.dataset_size,
        seed=args.task_seed))
    seeds = [int(s) for s in args.seeds.split(",") if s]
    cfg = trainer.TrainConfig(steps=args.steps, batch_size=args.batch,
                              learning_rate=args.lr)
    result = trainer.convergence_sweep(
        config, args.seed, _techniques(args), task, cfg, seeds,
        use_reference_rates=args.reference_rates)
    _emit(args, trainer.sweep_curves_csv(result))
    if args.summary_out:
        with open(args.summary_out, "w", encoding="utf-8", newline="") as fh:
            fh.write(_header(args) + trainer.sweep_summary_csv(result))
    else:
        sys.stdout.write(trainer.sweep_summary_csv(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _base_config(args)
    task = trainer.make_task(trainer.TaskSpec(
        kind="sequence-copy", vocab_size=args.vocab, seq_len=args.seq_len,
        dataset_size=1, seed=args.task_seed))
    tokens = [list(task.samples[0].ids)]
    targets = [list(task.samples[0].targets)]
    worst_overall = 0.0
    for technique in _techniques(args):
        base = build_base(config, args.seed)
        module = peft.build(technique, _hyper(args), config)
        _randomize_zero_sides(module)
        composed = attach(base, module)
        worst, _ = composed_gradcheck(composed, tokens, targets, eps=args.eps)
        status = "ok" if worst <= args.tolerance else "FAIL"
        print(f"{technique}: max relative error {worst:.3e} [{status}]")
        worst_overall = max(worst_overall, worst)
    if worst_overall > args.tolerance:
        print(f"gradient check failed: {worst_overall:.3e} > "
              f"{args.tolerance:.1e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _randomize_zero_sides(module) -> None:
    """Zero-initialized output sides hide gradient defects behind exact
    zeros; nudge every trainable tensor before checking."""
    rng = module.rng()
    for p in module.trainable_tensors():
        data = p.tensor.data
        for i in range(len(data)):
            data[i] += rng.uniform(-0.2, 0.2)


def cmd_export(args) -> int:
    config = _base_config(args)
    module = peft.build(args.technique, _hyper(args), config)
    if args.prefix_export:
        module = prefix_export_final(module)
    written = store.save_peft(module, args.out)
    print(f"wrote {written} bytes to {args.out}")
    return EXIT_OK


def cmd_validate_typology(args) -> int:
    config = _base_config(args)
    failures = 0
    for technique in _techniques(args):
        module = peft.build(technique, PeftHyperparams(), config)
        mismatches = validate_descriptor(module)
        if mismatches:
            failures += 1
            print(f"{technique}: MISMATCH")
            for m in mismatches:
                print(f"  {m}")
        else:
            print(f"{technique}: OK")
    return EXIT_CONFIG if failures else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> _Parser:
    parser = _Parser(prog="peftkit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-base", help="build and save a frozen base model")
    _add_base_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_base)

    p = sub.add_parser("analyze", help="parameter counts and complexity report")
    _add_base_flags(p)
    _add_technique_flags(p, multiple=True)
    p.add_argument("--format", choices=["csv", "text"], default="csv")
    p.add_argument("--timing", action="store_true",
                   help="print wall-clock forward timings to stderr")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train one technique on a synthetic task")
    _add_base_flags(p)
    _add_technique_flags(p)
    _add_run_flags(p)
    p.add_argument("--save-module", default=None,
                   help="write the trained module checkpoint here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="multi-seed convergence curves")
    _add_base_flags(p)
    _add_technique_flags(p, multiple=True)
    _add_run_flags(p)
    p.add_argument("--summary-out", default=None)
    p.add_argument("--reference-rates", action="store_true",
                   help="use per-technique reference learning rates")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every technique")
    _add_base_flags(p)
    _add_technique_flags(p, multiple=True)
    p.add_argument("--seq-len", type=int, default=4)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="save a module checkpoint")
    _add_base_flags(p)
    _add_technique_flags(p)
    p.add_argument("--prefix-export", action="store_true",
                   help="prefix tuning: save computed rows, drop the network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate-typology",
                       help="check module self-descriptions against the registry")
    _add_base_flags(p)
    _add_technique_flags(p, multiple=True)
    p.set_defaults(func=cmd_validate_typology)

    return parser


_CONFIG_ERRORS = (ConfigError, CompositionError, DimensionError, RankError,
                  SlotContractError)
_IO_ERRORS = (IntegrityError, CompatibilityError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TechniqueLookupError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DomainError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PeftKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
