"""
Command Line
============
Single entry point wiring the toolkit together. Results go to stdout or to
the files named by --out; logs go to stderr.

Usage:
    python -m app verify all
    python -m app bench --mechanisms softmax,psla_rank1 --lengths 512,1024,2048,4096 --out b.csv
    python -m app bench fit --in b.csv
    python -m app pdn --probe 27 --out z.csv --fit-out fit.json
    python -m app dpp gen --grid 6x6 --k 4 --seed 7 --out inst.json
    python -m app dpp eval --instance inst.json --placement p.json
    python -m app dpp train --instance inst.json --seed 1 --shaping dpp --out curve.csv
    python -m app attn run --in batch.json --out out.csv --mechanism psla_rank1

Exit codes:
    0  success
    1  a verification check failed
    2  usage, configuration or input error
"""

import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.attention import BiasMode, dense_psla_reference, linear_attention, psla_rank1, psla_symmetric_grid, softmax_attention
from app.bench import Mechanism, crossover_table, fit_scaling, group_by_mechanism, parse_mechanism, run_benchmarks
from app.config import GenerationSettings, MeshSettings, ToolkitSettings, load_settings
from app.dpp import PlacementState, generate_instance, placement_reward
from app.errors import InvalidInputError, ToolkitError
from app.formats import (
    AttentionRunFile,
    InstanceFile,
    PlacementFile,
    format_float,
    read_bench_csv,
    read_model,
    write_bench_csv,
    write_csv,
    write_json,
    write_matrix_csv,
    write_model,
)
from app.pdn import decay_sweep, fit_decay, impedance_profile, manhattan_to
from app.rl import ReinforceConfig, Shaping, train
from app.shaping import BetaSchedule, PotentialKind, PotentialSpec
from app.verify import SUITES, run_suite

logger = logging.getLogger("app")

PDN_COLUMNS = ("f_hz", "node_index", "d_manhattan", "abs_z", "re_z", "im_z")
TRAIN_COLUMNS = ("episode", "mean_return", "mean_shaped_return", "beta", "seconds")


# =============================================================================
# Argument Types
# =============================================================================

def grid_arg(text: str) -> Tuple[int, int]:
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like WxH, got {text!r}") from None
    if width < 1 or height < 1:
        raise argparse.ArgumentTypeError(f"grid {text!r} needs positive sides")
    return width, height


def int_list_arg(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def str_list_arg(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# =============================================================================
# verify
# =============================================================================

def cmd_verify(args, settings: ToolkitSettings) -> int:
    reports = run_suite(args.suite, seed=args.seed)
    print(f"{'suite':<6} {'check':<34} {'value':>12} {'threshold':>12}  result")
    for report in reports:
        for check in report.checks:
            print(f"{report.suite:<6} {check.name:<34} {check.value:>12.3e} {check.threshold:>12.3e}  "
                  f"{'PASS' if check.passed else 'FAIL'}")
    failed = [r.suite for r in reports if not r.passed]
    if failed:
        logger.error("[Verify] failing suites: %s", ", ".join(failed))
        return 1
    return 0


# =============================================================================
# bench
# =============================================================================

def cmd_bench(args, settings: ToolkitSettings) -> int:
    if args.action == "fit":
        if not args.input:
            raise InvalidInputError("bench fit needs --in results.csv")
        records = read_bench_csv(args.input)
        fits = [fit_scaling(group).to_dict() for group in group_by_mechanism(records).values()]
        print(json.dumps({"fits": fits, "crossovers": crossover_table(records)}, indent=2))
        return 0

    if not args.out:
        raise InvalidInputError("bench needs --out results.csv")
    mechanisms = args.mechanisms or settings.bench.mechanisms
    for name in mechanisms:
        parse_mechanism(name)
    records = run_benchmarks(
        mechanisms,
        args.lengths or settings.bench.lengths,
        d=args.d if args.d is not None else settings.bench.d,
        reps=args.reps if args.reps is not None else settings.bench.reps,
        seed=args.seed,
        warmup=settings.bench.warmup,
    )
    write_bench_csv(args.out, records)
    logger.info("[Bench] wrote %d records to %s", len(records), args.out)
    return 0


# =============================================================================
# pdn
# =============================================================================

def cmd_pdn(args, settings: ToolkitSettings) -> int:
    mesh = read_model(args.mesh, MeshSettings) if args.mesh else settings.mesh
    spec = mesh.to_spec()
    band = settings.band.to_band()
    distance = manhattan_to(spec, args.probe)
    rows = []
    for f in band.frequencies():
        z = impedance_profile(spec, f, args.probe)
        rows.extend((float(f), node, float(distance[node]), abs(z[node]), z[node].real, z[node].imag)
                    for node in range(spec.n_nodes))
    write_csv(args.out, PDN_COLUMNS, rows)
    if args.fit_out:
        center = fit_decay(spec, band.geometric_mean(), args.probe)
        write_json(args.fit_out, {
            "geometric_mean": center.to_dict(),
            "sweep": [fit.to_dict() for fit in decay_sweep(spec, band, args.probe)],
        })
        logger.info("[Kron] slope %.4g r2 %.4f at %.3g Hz", center.slope, center.r_squared, center.frequency)
    return 0


# =============================================================================
# dpp
# =============================================================================

def cmd_dpp_gen(args, settings: ToolkitSettings) -> int:
    updates = {}
    if args.grid:
        updates["width"], updates["height"] = args.grid
    if args.k is not None:
        updates["k_caps"] = args.k
    if args.keep_out_fraction is not None:
        updates["keep_out_fraction"] = args.keep_out_fraction
    cfg = GenerationSettings(**{**settings.generation.model_dump(), **updates})
    instance = generate_instance(cfg, args.seed, band=settings.band.to_band(),
                                 cap_model=settings.capacitor.to_model())
    write_model(args.out, InstanceFile.from_instance(instance))
    return 0


def cmd_dpp_eval(args, settings: ToolkitSettings) -> int:
    instance = read_model(args.instance, InstanceFile).to_instance()
    placed = read_model(args.placement, PlacementFile).placed
    state = PlacementState(instance, tuple(placed))
    print(format_float(placement_reward(instance, state.placed)))
    return 0


def cmd_dpp_train(args, settings: ToolkitSettings) -> int:
    instance = read_model(args.instance, InstanceFile).to_instance()
    rl = settings.rl
    episodes = args.episodes if args.episodes is not None else rl.episodes
    shaping = None
    if args.shaping == "dpp":
        potential = PotentialSpec(
            PotentialKind.DPP,
            alpha=settings.shaping.alpha,
            lam=args.lam if args.lam is not None else settings.shaping.lambda_,
            terminal_zeroed=settings.shaping.terminal_zeroed,
        )
        schedule = BetaSchedule(
            beta_init=args.beta_init if args.beta_init is not None else settings.shaping.beta_init,
            beta_min=args.beta_min if args.beta_min is not None else settings.shaping.beta_min,
            t_anneal=max(episodes, 1),
        )
        shaping = Shaping(potential, schedule)
    cfg = ReinforceConfig(
        episodes=episodes,
        batch_size=rl.batch_size,
        learning_rate=rl.learning_rate,
        gamma=args.gamma if args.gamma is not None else rl.gamma,
        baseline=rl.baseline,
        baseline_decay=rl.baseline_decay,
        shaping=shaping,
        seed=args.seed,
        eval_interval=rl.eval_interval,
        eval_rollouts=rl.eval_rollouts,
    )
    log = train(instance, cfg)
    write_csv(args.out, TRAIN_COLUMNS,
              ([p.episode, p.mean_return, p.mean_shaped_return, p.beta, p.seconds] for p in log.points))
    logger.info("[Reinforce] final return %.6g", log.final_return())
    return 0


# =============================================================================
# attn
# =============================================================================

def cmd_attn_run(args, settings: ToolkitSettings) -> int:
    run = read_model(args.input, AttentionRunFile)
    batch = run.to_batch()
    head = run.head.to_head()
    mechanism = parse_mechanism(args.mechanism)
    if mechanism == Mechanism.SOFTMAX:
        out = softmax_attention(batch)
    elif mechanism == Mechanism.LINEAR:
        out = linear_attention(batch, head.feature_map)
    elif mechanism == Mechanism.PSLA_RANK1:
        out = psla_rank1(batch, head, causal=args.causal)
    elif mechanism == Mechanism.PSLA_SYMMETRIC_GRID:
        if args.grid is None:
            raise InvalidInputError("psla_symmetric_grid needs --grid WxH")
        out = psla_symmetric_grid(batch, head, args.grid)
    else:
        out = dense_psla_reference(batch, head, BiasMode.SYMMETRIC, causal=args.causal)
    write_matrix_csv(args.out, out)
    return 0


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app", description="PSLA, PDN and shaped-RL toolkit")
    parser.add_argument("--config", help="JSON settings file")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="run self-check suites")
    verify.add_argument("suite", choices=[*SUITES, "all"])
    verify.add_argument("--seed", type=int, default=0, help="seed for the generated cases (default: 0)")
    verify.set_defaults(handler=cmd_verify)

    bench = sub.add_parser("bench", help="time attention mechanisms, or fit saved timings")
    bench.add_argument("action", nargs="?", choices=["fit"])
    bench.add_argument("--mechanisms", type=str_list_arg)
    bench.add_argument("--lengths", type=int_list_arg)
    bench.add_argument("--d", type=int)
    bench.add_argument("--reps", type=int)
    bench.add_argument("--seed", type=int, default=0, help="seed for the benchmark inputs (default: 0)")
    bench.add_argument("--out")
    bench.add_argument("--in", dest="input")
    bench.set_defaults(handler=cmd_bench)

    pdn = sub.add_parser("pdn", help="impedance profile and decay fit of a mesh")
    pdn.add_argument("--mesh", help="mesh JSON; defaults to the [mesh] settings")
    pdn.add_argument("--probe", type=int, required=True)
    pdn.add_argument("--out", required=True)
    pdn.add_argument("--fit-out")
    pdn.set_defaults(handler=cmd_pdn)

    dpp = sub.add_parser("dpp", help="decoupling-capacitor placement")
    dpp_sub = dpp.add_subparsers(dest="dpp_command", required=True)

    gen = dpp_sub.add_parser("gen", help="generate an instance")
    gen.add_argument("--grid", type=grid_arg)
    gen.add_argument("--k", type=int)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--keep-out-fraction", type=float)
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_dpp_gen)

    ev = dpp_sub.add_parser("eval", help="reward of a placement")
    ev.add_argument("--instance", required=True)
    ev.add_argument("--placement", required=True)
    ev.set_defaults(handler=cmd_dpp_eval)

    tr = dpp_sub.add_parser("train", help="REINFORCE with optional shaping")
    tr.add_argument("--instance", required=True)
    tr.add_argument("--episodes", type=int)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--shaping", choices=["none", "dpp"], default="none")
    tr.add_argument("--beta-init", type=float)
    tr.add_argument("--beta-min", type=float)
    tr.add_argument("--lambda", dest="lam", type=float)
    tr.add_argument("--gamma", type=float)
    tr.add_argument("--out", required=True)
    tr.set_defaults(handler=cmd_dpp_train)

    attn = sub.add_parser("attn", help="attention forward passes")
    attn_sub = attn.add_subparsers(dest="attn_command", required=True)
    run = attn_sub.add_parser("run", help="one forward pass over a JSON batch")
    run.add_argument("--in", dest="input", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--mechanism", default=Mechanism.PSLA_RANK1.value,
                     choices=[m.value for m in Mechanism])
    run.add_argument("--grid", type=grid_arg)
    run.add_argument("--causal", action="store_true")
    run.set_defaults(handler=cmd_attn_run)
    return parser


def _one_line(exc: Exception) -> str:
    return "; ".join(line.strip() for line in str(exc).splitlines() if line.strip())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        settings = load_settings(args.config)
        return args.handler(args, settings)
    except (ToolkitError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2
