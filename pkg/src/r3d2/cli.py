"""Command line entry point: r3d2 {train,eval,xplay,transfer,play,inspect,replay}."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence, TextIO

import torch

from r3d2.engine import GameConfig, HanabiError, new_game, observe, parse_logs
from r3d2.evaluate import (
    RANDOM,
    PolicySpec,
    crossplay_matrix,
    play_games,
    policies_in,
    transfer_eval,
    write_plot_data,
)
from r3d2.qnet import CheckpointError, read_checkpoint
from r3d2.textenc import ActionParseError, TemplateOptions, parse_action, render_action, render_observation

logger = logging.getLogger("r3d2")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _settings(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated player counts, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty player-count list")
    return values


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r3d2", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run self-play training")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--settings", type=_settings, help="player counts, e.g. 2,3")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--updates-per-epoch", type=int)
    p.add_argument("--threaded", action="store_true", help="free-running actor threads (not bit-reproducible)")

    p = sub.add_parser("eval", help="evaluate one team")
    p.add_argument("--team", required=True, help=f"comma-separated checkpoints or '{RANDOM}'")
    p.add_argument("--players", type=int, help="defaults to the team size")
    p.add_argument("--games", type=int, default=1000)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--colors", type=int)
    p.add_argument("--ranks", type=int)
    p.add_argument("--json", help="write the full report here")
    p.add_argument("--record", help="write replayable action logs here")

    p = sub.add_parser("xplay", help="cross-play matrix over a checkpoint directory")
    p.add_argument("--policies", required=True, help="directory of .ckpt files")
    p.add_argument("--out", required=True, help="matrix CSV; a heatmap PNG is written alongside")
    p.add_argument("--players", type=int, default=2)
    p.add_argument("--games", type=int, default=1000)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--json")
    p.add_argument("--plot-data", help="CSV of SP / intra-XP / inter-XP aggregates")

    p = sub.add_parser("transfer", help="zero-shot transfer across player counts")
    p.add_argument("--n", type=int, required=True, help="player count of the evaluation games")
    p.add_argument("--n-pool", required=True, help="directory of checkpoints trained with n players")
    p.add_argument("--m-pool", required=True, help="directory of checkpoints trained with m players")
    p.add_argument("--games", type=int, default=1000)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--json", help="full report; a per-i bar chart PNG is written alongside")
    p.add_argument("--plot-data")

    p = sub.add_parser("play", help="play a seat yourself against a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seat", type=int, default=0)
    p.add_argument("--players", type=int, default=2)
    p.add_argument("--seed", type=_u64, default=0)

    p = sub.add_parser("inspect", help="print a checkpoint's header")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=_u64, default=0, help="accepted for uniformity; unused")

    p = sub.add_parser("replay", help="re-execute recorded games and verify their scores")
    p.add_argument("--log", required=True)
    p.add_argument("--seed", type=_u64, help="only replay the game with this deck seed")
    return parser


# -- helpers ------------------------------------------------------------------


def _apply_thread_cap() -> None:
    raw = os.environ.get("R3D2_THREADS", "")
    if raw:
        try:
            torch.set_num_threads(max(1, int(raw)))
        except ValueError:
            raise UsageError(f"R3D2_THREADS must be an integer, got {raw!r}")


def _spec(entry: str) -> PolicySpec:
    if entry == RANDOM:
        return PolicySpec(RANDOM, RANDOM, RANDOM)
    if not Path(entry).is_file():
        raise UsageError(f"--team: no such checkpoint {entry!r}")
    return PolicySpec.from_checkpoint(entry)


def _game_shape(specs: Sequence[PolicySpec], colors: Optional[int], ranks: Optional[int]) -> tuple[int, int]:
    metas = [read_checkpoint(s.path).meta for s in specs if s.path != RANDOM]
    shapes = {(m.get("colors", 5), m.get("ranks", 5)) for m in metas}
    if len(shapes) > 1 and (colors is None or ranks is None):
        logger.warning("team checkpoints were trained on different deck shapes: %s", sorted(shapes))
    default = min(shapes) if shapes else (5, 5)
    return (colors or default[0], ranks or default[1])


def _dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------


def cmd_train(args, out: TextIO) -> int:
    from r3d2.plotting import training_curve
    from r3d2.trainer import TrainConfig, load_config, run_training

    overrides = {
        "settings": args.settings,
        "seed": args.seed,
        "epochs": args.epochs,
        "updates_per_epoch": args.updates_per_epoch,
    }
    if args.threaded:
        overrides["deterministic"] = False
    try:
        if args.config:
            cfg = load_config(args.config, **overrides)
        else:
            cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--config: {exc}")

    def progress(record):
        print(json.dumps(record), file=out, flush=True)

    result = run_training(cfg, args.out, progress)
    curve = training_curve(result.metrics_path, Path(args.out) / "training_curve.png")
    print(f"wrote {len(result.checkpoints)} checkpoints and {curve} under {args.out}", file=out)
    return EXIT_OK


def cmd_eval(args, out: TextIO) -> int:
    specs = [_spec(e.strip()) for e in args.team.split(",") if e.strip()]
    players = args.players or len(specs)
    if len(specs) != players:
        raise UsageError(f"--team has {len(specs)} members but --players is {players}")
    if args.games < 1:
        raise UsageError("--games must be positive")
    colors, ranks = _game_shape(specs, args.colors, args.ranks)
    config = GameConfig(players=players, colors=colors, ranks=ranks)
    record = [] if args.record else None
    report = play_games(specs, config, args.games, args.seed, record=record)
    print(
        f"team={','.join(report.team)} players={players} games={report.games} "
        f"mean={report.mean:.4f} stderr={report.stderr:.4f} bomb_rate={report.bomb_rate:.4f}",
        file=out,
    )
    if args.json:
        _dump_json(report.to_dict(), args.json)
    if record is not None:
        Path(args.record).write_text("".join(log.dumps() for log in record))
    return EXIT_OK


def cmd_xplay(args, out: TextIO) -> int:
    from r3d2.plotting import bar_chart, crossplay_heatmap

    if not Path(args.policies).is_dir():
        raise UsageError(f"--policies: {args.policies!r} is not a directory")
    specs = policies_in(args.policies)
    if not specs:
        raise UsageError(f"--policies: no .ckpt files in {args.policies!r}")
    colors, ranks = _game_shape(specs, None, None)
    config = GameConfig(players=args.players, colors=colors, ranks=ranks)
    result = crossplay_matrix(specs, config, args.games, args.seed)
    result.write_csv(args.out)
    figure = crossplay_heatmap(result.means, result.labels, Path(args.out).with_suffix(".png"))
    rows = result.plot_rows()
    for row in rows:
        print(f"{row['group']}: {row['value']:.4f}", file=out)
    if args.json:
        _dump_json(
            {"labels": result.labels, "families": result.families,
             "reports": [[r.to_dict() for r in row] for row in result.reports]},
            args.json,
        )
    if args.plot_data:
        write_plot_data(rows, args.plot_data)
        bar_chart(rows, Path(args.plot_data).with_suffix(".png"), "self-play and cross-play")
    print(f"wrote {args.out} and {figure}", file=out)
    return EXIT_OK


def cmd_transfer(args, out: TextIO) -> int:
    from r3d2.plotting import bar_chart

    if not 2 <= args.n <= 5:
        raise UsageError(f"--n must be in 2..5, got {args.n}")
    pools = {}
    for flag, directory in (("--n-pool", args.n_pool), ("--m-pool", args.m_pool)):
        if not Path(directory).is_dir():
            raise UsageError(f"{flag}: {directory!r} is not a directory")
        pools[flag] = policies_in(directory)
        if not pools[flag]:
            raise UsageError(f"{flag}: no .ckpt files in {directory!r}")
    colors, ranks = _game_shape(pools["--n-pool"] + pools["--m-pool"], None, None)
    report = transfer_eval(
        args.n, pools["--m-pool"], pools["--n-pool"], args.games, args.seed, colors, ranks
    )
    for i, row in report.per_i.items():
        print(f"i={i} teams={row['teams']} mean={row['mean']:.4f}", file=out)
    print(f"overall mean={report.mean:.4f} ({report.pairing})", file=out)
    for msg in report.warnings:
        print(f"warning: {msg}", file=out)
    if args.json:
        _dump_json(report.to_dict(), args.json)
        bar_chart(report.plot_rows(), Path(args.json).with_suffix(".png"), f"transfer into {args.n}p")
    if args.plot_data:
        write_plot_data(report.plot_rows(), args.plot_data)
    return EXIT_OK


def cmd_play(args, out: TextIO, inp: TextIO) -> int:
    from r3d2.agent import TextAgent

    if not 2 <= args.players <= 5:
        raise UsageError(f"--players must be in 2..5, got {args.players}")
    if not 0 <= args.seat < args.players:
        raise UsageError(f"--seat must be in [0, {args.players}), got {args.seat}")
    ckpt = read_checkpoint(args.ckpt)
    agent = TextAgent.from_checkpoint(ckpt)
    config = GameConfig(
        players=args.players,
        colors=ckpt.meta.get("colors", 5),
        ranks=ckpt.meta.get("ranks", 5),
        seed=args.seed,
    )
    options: TemplateOptions = agent.options
    state = new_game(config)
    rec = agent.initial_state(config.players)
    total = 0.0
    while not state.terminal:
        seat = state.current_player
        obs = observe(state, seat)
        if seat == args.seat:
            print(render_observation(obs, config, options), file=out)
            action = _read_action(obs.legal_actions, config, out, inp)
            if action is None:
                print("input closed; game abandoned", file=out)
                return EXIT_RUNTIME
        else:
            rows = [seat]
            picks, sub, _, _ = agent.act([obs], [config], rec.select(rows))
            for t, value in enumerate(sub):
                rec[t][rows] = value
            action = obs.legal_actions[picks[0]]
            print(f"player {seat}: {render_action(action)}", file=out)
        total += state.step(action)
    print(f"game over: score {total:g}", file=out)
    return EXIT_OK


def _read_action(legal, config, out: TextIO, inp: TextIO):
    while True:
        out.write("> ")
        out.flush()
        line = inp.readline()
        if not line:
            return None
        try:
            action = parse_action(line, config)
        except ActionParseError as exc:
            action, problem = None, str(exc)
        else:
            problem = "not legal now"
        if action in legal:
            return action
        print(f"{problem}; legal actions: {', '.join(render_action(a) for a in legal)}", file=out)


def cmd_inspect(args, out: TextIO) -> int:
    ckpt = read_checkpoint(args.ckpt)
    print(f"step: {ckpt.step}", file=out)
    print(f"vocab: {len(ckpt.vocab)} tokens sha256={ckpt.vocab.sha256}", file=out)
    print("encoder_config: " + json.dumps(ckpt.encoder_config.__dict__, sort_keys=True), file=out)
    print("meta: " + json.dumps(ckpt.meta, sort_keys=True), file=out)
    total = 0
    for name, arr in ckpt.arrays.items():
        total += arr.size
        print(f"  {name} {tuple(arr.shape)}", file=out)
    print(f"parameters: {total}", file=out)
    return EXIT_OK


def cmd_replay(args, out: TextIO) -> int:
    try:
        logs = parse_logs(Path(args.log).read_text())
    except (ValueError, KeyError) as exc:
        raise UsageError(f"--log: cannot parse {args.log!r}: {exc}")
    if args.seed is not None:
        logs = [log for log in logs if log.seed == args.seed]
        if not logs:
            raise UsageError(f"--seed: no game with seed {args.seed} in {args.log!r}")
    failures = 0
    for log in logs:
        state = new_game(log.config.with_seed(log.seed))
        total = 0.0
        for text in log.actions:
            total += state.step(parse_action(text, log.config))
        ok = log.score is None or total == log.score
        failures += not ok
        status = "ok" if ok else f"MISMATCH (recorded {log.score:g})"
        print(f"seed={log.seed} actions={len(log.actions)} score={total:g} {status}", file=out)
    print(f"{len(logs) - failures}/{len(logs)} games verified", file=out)
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "xplay": cmd_xplay,
    "transfer": cmd_transfer,
    "inspect": cmd_inspect,
    "replay": cmd_replay,
}


def main(argv: Optional[Sequence[str]] = None, out: TextIO = None, inp: TextIO = None) -> int:
    out = out or sys.stdout
    inp = inp or sys.stdin
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _apply_thread_cap()
        if args.command == "play":
            return cmd_play(args, out, inp)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"r3d2 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HanabiError, CheckpointError, OSError, ValueError, ArithmeticError) as exc:
        print(f"r3d2 {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
