"""Command-line entry point: ``plcrnn {mix,train,enhance,analyze,sweep}``.

Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
3 numerical abort during training, 4 checkpoint or artifact mismatch.

``train`` and ``sweep`` accept ``--config FILE``, an INI file whose
``[train]`` section uses the long flag names with dashes replaced by
underscores (``q = 3``, ``target = iam``, ``deltas = 5,10,20`` ...).
Flags given on the command line override file values.
"""

import argparse
import configparser
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import complexity
from .mixer import SNR_GRID, load_corpus, read_wav, sdr, synth_corpus, write_corpus, write_wav
from .model import (CheckpointError, build_plcrnn, count_params, enhance_stages, load_checkpoint,
                    save_checkpoint)
from .targets import TABLE2, TARGET_KINDS, PlanError, StagePlan
from .tensor import SerializationError, save_tensor
from .trainer import NumericalAbort, TrainConfig, stage_sdrs, train

log = logging.getLogger("plcrnn")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4


class UsageError(ValueError):
    pass


def parse_float_list(text):
    """``"2,3,4"`` -> ``[2.0, 3.0, 4.0]``; ``"-5:10"`` -> every integer from -5 to 10."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            return [float(v) for v in range(lo, hi + 1)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


# -- run configuration --------------------------------------------------------------

# name -> (type, default); shared by train and sweep
TRAIN_KEYS = {
    "q": (int, 3),
    "target": (str, "tms"),
    "scale": (float, 0.125),
    "epochs": (int, 100),
    "batch": (int, 16),
    "lr": (float, 1e-3),
    "seed": (int, 0),
    "deltas": (str, None),
    "allow_custom_plan": (bool, False),
    "no_clip": (bool, False),
    "compare_to": (str, "previous"),
    "eval_fraction": (float, 0.1),
}


def _coerce(key, kind, raw):
    if isinstance(raw, str) and kind is bool:
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes", "on")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot read {raw!r} as {kind.__name__}") from None


def effective_config(args, keys=TRAIN_KEYS):
    """Merge defaults, the ``[train]`` section of ``--config`` and explicit flags."""
    cfg = {k: d for k, (_, d) in keys.items()}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        try:
            with open(args.config) as f:
                parser.read_file(f)
        except (OSError, configparser.Error) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if parser.has_section("train"):
            for key, raw in parser.items("train"):
                key = key.replace("-", "_")
                if key not in keys:
                    raise UsageError(f"unknown config key {key!r} in {args.config}")
                cfg[key] = _coerce(key, keys[key][0], raw)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    return cfg


def plan_from_config(cfg):
    q, kind = cfg["q"], cfg["target"]
    if kind not in TARGET_KINDS:
        raise UsageError(f"--target must be one of {TARGET_KINDS}, got {kind!r}")
    deltas = cfg["deltas"]
    if deltas is None:
        if q not in TABLE2:
            raise UsageError(f"no standard plan for --q {q} (standard: {sorted(TABLE2)}); "
                             "pass --allow-custom-plan with --deltas")
        return StagePlan.standard(q, kind)
    values = tuple(parse_float_list(deltas))
    if not cfg["allow_custom_plan"] and (q not in TABLE2 or values != TABLE2[q]):
        raise UsageError("custom stage deltas need --allow-custom-plan")
    if len(values) != q - 1:
        raise UsageError(f"--q {q} needs {q - 1} deltas, got {len(values)}")
    try:
        return StagePlan.custom(values, kind)
    except PlanError as exc:
        raise UsageError(str(exc)) from exc


def train_config(cfg, plan):
    try:
        return TrainConfig(lr0=cfg["lr"], batch=cfg["batch"], max_epochs=cfg["epochs"], seed=cfg["seed"],
                           plan=plan, width_scale=cfg["scale"],
                           clip_norm=None if cfg["no_clip"] else 5.0, compare_to=cfg["compare_to"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def echo_config(cfg, out):
    for key in sorted(cfg):
        out.write(f"# {key} = {cfg[key]}\n")


def split_corpus(pairs, eval_fraction):
    """Hold out the last ``ceil(fraction * n)`` utterances (at least one) for evaluation."""
    if len(pairs) < 2:
        raise UsageError(f"corpus needs at least 2 utterances for a train/eval split, has {len(pairs)}")
    n_eval = min(len(pairs) - 1, max(1, int(np.ceil(eval_fraction * len(pairs)))))
    return pairs[:-n_eval], pairs[-n_eval:]


def _load_pairs(corpus):
    if not (Path(corpus) / "manifest.tsv").exists():
        raise UsageError(f"{corpus} is not a corpus directory (no manifest.tsv)")
    return load_corpus(corpus)


# -- commands -----------------------------------------------------------------------

def cmd_mix(args):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    grid = parse_float_list(args.snr_grid) if args.snr_grid else list(SNR_GRID)
    pairs = synth_corpus(args.n, args.seed, snr_grid=grid)
    write_corpus(pairs, args.out)
    print(f"wrote {len(pairs)} utterances to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = effective_config(args)
    plan = plan_from_config(cfg)
    tcfg = train_config(cfg, plan)
    train_pairs, eval_pairs = split_corpus(_load_pairs(args.corpus), cfg["eval_fraction"])
    echo_config(cfg, sys.stdout)
    graph = build_plcrnn(plan, cfg["scale"], seed=cfg["seed"])
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w") as lf:
        echo_config(cfg, lf)
        try:
            state = train(graph, train_pairs, eval_pairs, tcfg, log_file=lf)
        except NumericalAbort as exc:
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(graph, args.out)
    print(f"stopped after epoch {state.epoch} ({state.stop_reason}); best eval loss "
          f"{state.best_eval:.6g} at epoch {state.best_epoch}")
    print(f"checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def cmd_enhance(args):
    graph = load_checkpoint(args.ckpt, expect_q=args.q, expect_target=args.target)
    noisy = read_wav(args.inp)
    signals, mags = enhance_stages(graph, noisy)
    write_wav(args.out, signals[-1])
    if args.dump_stages:
        out = Path(args.dump_stages)
        out.mkdir(parents=True, exist_ok=True)
        for q, m in enumerate(mags, start=1):
            save_tensor(out / f"stage{q}.ptns", m)
    if args.ref:
        clean = read_wav(args.ref)
        if len(clean) != len(noisy):
            raise UsageError(f"reference has {len(clean)} samples, input has {len(noisy)}")
        print(f"noisy_sdr\t{sdr(clean, noisy):.3f}")
        print(f"enhanced_sdr\t{sdr(clean, signals[-1]):.3f}")
    return EXIT_OK


def cmd_analyze(args):
    if args.spec.startswith("builtin:"):
        name = args.spec[len("builtin:"):]
        if name not in complexity.BUILTINS:
            raise UsageError(f"unknown builtin {name!r}; valid names: {', '.join(complexity.BUILTINS)}")
        spec = complexity.builtin(name)
    else:
        try:
            text = Path(args.spec).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read spec file {args.spec}: {exc}") from exc
        spec = complexity.parse_spec(text, name=Path(args.spec).stem)
    report = complexity.analyze(spec, frames=args.frames)
    print(complexity.render_report(report, args.format), end="")
    return EXIT_OK


SWEEP_HEADER = ("q", "params", "noisy_sdr", "enhanced_sdr", "improvement")


def _sweep_one(q, cfg, train_pairs, eval_pairs):
    seed_q = int(np.random.SeedSequence([cfg["seed"], q]).generate_state(1)[0])
    plan = StagePlan.standard(q, cfg["target"])
    graph = build_plcrnn(plan, cfg["scale"], seed=seed_q)
    tcfg = train_config({**cfg, "seed": seed_q}, plan)
    train(graph, train_pairs, eval_pairs, tcfg)
    noisy = float(np.mean([sdr(p.clean, p.noisy) for p in eval_pairs]))
    enhanced = float(stage_sdrs(graph, eval_pairs)[-1])
    return q, count_params(graph), noisy, enhanced, enhanced - noisy


def cmd_sweep(args):
    cfg = effective_config(args)
    qs = [int(v) for v in parse_float_list(args.q_list)]
    bad = [q for q in qs if q not in TABLE2]
    if not qs or bad:
        raise UsageError(f"--q-list entries must be in {sorted(TABLE2)}, got {args.q_list!r}")
    if cfg["target"] not in TARGET_KINDS:
        raise UsageError(f"--target must be one of {TARGET_KINDS}")
    train_pairs, eval_pairs = split_corpus(_load_pairs(args.corpus), cfg["eval_fraction"])
    echo_config(cfg, sys.stdout)
    jobs = max(1, args.jobs)
    try:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda q: _sweep_one(q, cfg, train_pairs, eval_pairs), qs))
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print("\t".join(SWEEP_HEADER))
    for q, params, noisy, enhanced, gain in rows:
        print(f"{q}\t{params}\t{noisy:.3f}\t{enhanced:.3f}\t{gain:.3f}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="INI file with a [train] section; flags override its values")
    p.add_argument("--target", choices=TARGET_KINDS, help="training target: tms magnitudes or iam masks (default tms)")
    p.add_argument("--scale", type=float, help="channel width multiplier (default 0.125)")
    p.add_argument("--epochs", type=int, help="maximum number of epochs (default 100)")
    p.add_argument("--batch", type=int, help="utterances per minibatch (default 16)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-3)")
    p.add_argument("--seed", type=int, help="seed for initialisation and shuffling (default 0)")
    p.add_argument("--no-clip", action="store_true", default=None,
                   help="disable global gradient-norm clipping at 5")
    p.add_argument("--compare-to", choices=("previous", "best"),
                   help="an eval-loss increase is measured against the previous epoch (default) or the best so far")
    p.add_argument("--eval-fraction", type=float,
                   help="fraction of the corpus held out for evaluation (default 0.1, at least one utterance)")


def build_parser():
    parser = argparse.ArgumentParser(prog="plcrnn", description="Progressive causal CRNN speech enhancement toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="fabricate a synthetic noisy corpus")
    p.add_argument("--out", required=True, help="output directory for WAV files and manifest.tsv")
    p.add_argument("--n", type=int, required=True, help="number of utterances")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    p.add_argument("--snr-grid", help="SNR levels in dB, comma list or LO:HI (default -5:10); "
                                      "write --snr-grid=-5,0 for negative leading values")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--corpus", required=True, help="corpus directory written by mix")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--q", type=int, help="number of stages (default 3)")
    p.add_argument("--deltas", help="comma list of intermediate SNR improvements in dB (needs --allow-custom-plan "
                                    "unless equal to the standard plan)")
    p.add_argument("--allow-custom-plan", action="store_true", default=None,
                   help="accept non-standard stage counts and deltas")
    p.add_argument("--log", help="epoch log path (default CHECKPOINT.log)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one WAV file with a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    p.add_argument("--in", dest="inp", required=True, help="noisy 16 kHz mono WAV")
    p.add_argument("--out", required=True, help="enhanced WAV path")
    p.add_argument("--dump-stages", help="directory receiving one stage{q}.ptns magnitude tensor per stage")
    p.add_argument("--ref", help="clean reference WAV; prints noisy and enhanced SDR")
    p.add_argument("--q", type=int, help="fail with exit 4 unless the checkpoint has this many stages")
    p.add_argument("--target", choices=TARGET_KINDS, help="fail with exit 4 unless the checkpoint uses this target")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("analyze", help="parameter and multiply-add report")
    p.add_argument("--spec", required=True,
                   help=f"builtin:NAME ({', '.join(complexity.BUILTINS)}) or a layer spec file")
    p.add_argument("--format", choices=("text", "machine"), default="text",
                   help="aligned table (default) or tab-separated rows")
    p.add_argument("--frames", type=int, default=1, help="frames per second of audio to cost (default 1)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train one model per stage count and tabulate SDR gains")
    p.add_argument("--corpus", required=True, help="corpus directory written by mix")
    p.add_argument("--q-list", default="2,3,4,5", help="comma list of stage counts (default 2,3,4,5)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker threads (default 1)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, PlanError, complexity.SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, SerializationError) as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
