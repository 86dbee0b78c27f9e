"""``gdr2`` command line.

Every command prints tab-separated report records (see :mod:`gdr2.report`)
and exits 0 iff no asserted case failed. Bad input files or options exit 2.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import bench, checks
from .config import ConfigError, RunConfig
from .core import ContractError, DimensionError
from .layer import forward_layer
from .recall import RecallModel, RecallTask, descent_step, train
from .report import Report, write_csv
from .tensorfile import TensorFileError, read_tensors, write_tensors

TARGET_REDUCTION = 0.5
DESCENT_LR = 1e-6


class PromptError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"prompt at byte {offset}: {message}")
        self.offset = offset


def parse_prompt(data: bytes, vocab: int) -> list[int]:
    """Whitespace-separated decimal token ids in ``[0, vocab)``."""
    tokens = []
    pos, n = 0, len(data)
    while pos < n:
        if data[pos:pos + 1].isspace():
            pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        word = data[start:pos]
        if not word.isdigit():
            raise PromptError(start, f"not a token id: {word[:20]!r}")
        tok = int(word)
        if tok >= vocab:
            raise PromptError(start, f"token {tok} outside vocabulary of {vocab}")
        tokens.append(tok)
    if not tokens:
        raise PromptError(0, "empty prompt")
    return tokens


# -- commands -------------------------------------------------------------------

def cmd_check_equivalence(cfg: RunConfig, args) -> Report:
    rep = checks.check_equivalence(cfg)
    rep.extend(checks.check_modes(cfg))
    return rep


def cmd_check_gradients(cfg: RunConfig, args) -> Report:
    if cfg.precision != "f64":
        raise ContractError("check-gradients runs in binary64 only (use --precision f64)")
    return checks.check_gradients(cfg)


def cmd_check_reductions(cfg: RunConfig, args) -> Report:
    rep = checks.check_reductions(cfg)
    rep.extend(checks.check_minimizer(cfg))
    return rep


def cmd_bench(cfg: RunConfig, args) -> Report:
    rep, rows = bench.run_bench(cfg)
    if args.csv:
        Path(args.csv).write_text(write_csv(bench.CSV_HEADER, rows), encoding="utf-8")
    return rep


def run_train_recall(cfg: RunConfig, save=None) -> Report:
    """Sweep learning rates from largest to smallest until one halves the loss.

    The remaining rules are then trained at the winning rate and their query
    accuracy reported.
    """
    rep = Report()
    task = RecallTask(cfg.vocab, cfg.pairs, cfg.L)
    prec = cfg.precision
    lcfg = checks.config_for_layer(cfg, rule="gdr2")

    before, after = descent_step(task, lcfg, DESCENT_LR, cfg.batch, cfg.seed)
    rep.check("recall", f"descent-lr{DESCENT_LR:g}-{prec}", "loss_increase", after - before, "<=0")

    winner = None
    for lr in sorted(cfg.lr, reverse=True):
        res = train(task, lcfg, lr, cfg.steps, cfg.batch, cfg.seed, target_reduction=TARGET_REDUCTION,
                    return_model=True)
        case = f"gdr2-lr{lr:g}-{prec}"
        rep.check("recall", case, "initial_loss_minus_ln_vocab", abs(res.initial_loss - math.log(cfg.vocab)), "<=1e-6")
        rep.info("recall", case, "steps", res.steps)
        rep.info("recall", case, "diverged", float(res.diverged))
        if not res.diverged and res.reduction >= TARGET_REDUCTION:
            winner = res
            break
        rep.info("recall", case, "loss_reduction", res.reduction if not res.diverged else float("nan"))
    if winner is None:
        rep.check("recall", f"gdr2-sweep-{prec}", "best_loss_reduction", 0.0, f">={TARGET_REDUCTION:g}")
        return rep
    rep.check("recall", f"gdr2-lr{winner.lr:g}-{prec}", "loss_reduction", winner.reduction, f">={TARGET_REDUCTION:g}")
    if save:
        write_tensors(save, winner.model.tensors())

    for rule in cfg.rules:
        res = winner if rule == "gdr2" else train(task, checks.config_for_layer(cfg, rule=rule), winner.lr, cfg.steps,
                                                  cfg.batch, cfg.seed, target_reduction=TARGET_REDUCTION)
        case = f"{rule}-lr{winner.lr:g}-{prec}"
        rep.info("recall", case, "query_accuracy", res.final_accuracy)
        rep.info("recall", case, "final_loss", res.final_loss)
        if rule != "gdr2":
            rep.info("recall", case, "steps", res.steps)
    return rep


def cmd_train_recall(cfg: RunConfig, args) -> Report:
    return run_train_recall(cfg, args.save)


def run_decode(cfg: RunConfig, params_path, prompt_path, steps: int, state_out=None) -> Report:
    lcfg = checks.config_for_layer(cfg)
    model = RecallModel.from_tensors(lcfg, read_tensors(params_path, expect_dtype=lcfg.dtype))
    prompt = parse_prompt(Path(prompt_path).read_bytes(), model.vocab)
    generated, state = model.greedy_decode(np.asarray(prompt), steps)
    rep = Report()
    for i, tok in enumerate(generated):
        rep.info("decode", f"step{i}", "token", tok)
    stream = np.asarray(prompt + generated)
    _, chunked = forward_layer(model.params, lcfg, model.embed[stream])
    case = f"L{len(stream)}-C{lcfg.chunk_size}-{cfg.precision}"
    rep.check("decode", case, "max_abs_diff_state_vs_chunked", checks.max_abs(state.S, chunked.S), f"<={checks.TOL_F64:g}")
    conv = max(checks.max_abs(state.conv[p], chunked.conv[p]) for p in ("q", "k", "v"))
    rep.check("decode", case, "max_abs_diff_conv_vs_chunked", conv, f"<={checks.TOL_F64:g}")
    if state_out:
        write_tensors(state_out, {"S": state.S, **{f"conv_{p}": state.conv[p] for p in ("q", "k", "v")}})
    return rep


def cmd_decode(cfg: RunConfig, args) -> Report:
    steps = cfg.decode_steps if args.steps is None else args.steps
    if steps < 0:
        raise ContractError("--steps must be >= 0")
    return run_decode(cfg, args.params, args.prompt, steps, args.state_out)


COMMANDS = {
    "check-equivalence": cmd_check_equivalence,
    "check-gradients": cmd_check_gradients,
    "check-reductions": cmd_check_reductions,
    "bench": cmd_bench,
    "train-recall": cmd_train_recall,
    "decode": cmd_decode,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--precision", choices=("f32", "f64"), help="override the config precision")
    common.add_argument("--csv", help="write the benchmark series to this CSV file")

    parser = argparse.ArgumentParser(prog="gdr2", description="Gated delta rule-2 verification harness.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-recall":
            p.add_argument("--save", help="write the trained model tensors here")
        if name == "decode":
            p.add_argument("--params", required=True, help="model tensors written by train-recall --save")
            p.add_argument("--prompt", required=True, help="whitespace-separated token ids")
            p.add_argument("--steps", type=int, help="tokens to generate (default: config decode_steps)")
            p.add_argument("--state-out", help="write the final decode state here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(seed=args.seed, precision=args.precision)
        cfg.validate()
        rep = COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractError, DimensionError, TensorFileError, PromptError, OSError) as exc:
        print(f"gdr2 {args.command}: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(rep.text())
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
