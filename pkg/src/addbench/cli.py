"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .channel import CONCEALMENTS, LOSS_MODELS, ChannelCondition, LossModel, transmit_with_mask
from .codec import lookup_codec
from .corpus import load_audio, write_wav
from .errors import AddBenchError, ConfigError
from .pipeline import (RunConfig, load_config, run_all, stage_augment, stage_build_addc, stage_eval,
                       stage_features, stage_report, stage_train, toolchain, write_config)

log = logging.getLogger("addbench")


def _plr(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"packet loss rate must lie in [0, 1], got {v}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="addbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="store_true", help="print toolchain versions and config digest")
    p.add_argument("--config", type=Path, help="run configuration (INI)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd")

    s = sub.add_parser("simulate", help="one codec + packet-loss pass on one file")
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--codec", default="identity", help="codec name, or 'identity'")
    s.add_argument("--plr", type=_plr, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--loss-model", choices=LOSS_MODELS, default="bernoulli")
    s.add_argument("--concealment", choices=CONCEALMENTS, default="zero_fill")
    s.add_argument("--frame-ms", type=float, default=20.0)

    for name, helptext in (("build-addc", "build the C0..C5 condition set"),
                           ("augment", "render the augmented training set"),
                           ("features", "extract and cache features"),
                           ("train", "train the configured detector"),
                           ("eval", "score ADD-C and write reports"),
                           ("report", "merge all reports"),
                           ("run", "every stage in order")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--force", action="store_true", help="rebuild even if outputs look current")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--workers", type=_positive, help="override [run] workers")
        sp.add_argument("--feature", choices=("lfcc", "cqcc", "raw"), help="override [features] kind")
        sp.add_argument("--model", choices=("gmm", "mlp"), help="override [detector] model")
        sp.add_argument("--train-on", choices=("clean", "augmented"), help="override [detector] train_on")
        sp.add_argument("-K", type=_positive, dest="K", help="override [detector] k (GMM components)")
        sp.add_argument("--per-dataset", type=_positive, help="override [run] per_dataset")
        if name == "eval":
            sp.add_argument("--scores", type=Path, help="evaluate an external score CSV instead")

    d = sub.add_parser("demo", help="write the synthetic demo corpus and a matching config")
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--per-class", type=_positive, default=5, help="utterances per class per source")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--run", action="store_true", help="also run the full pipeline on it")
    return p


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("this command needs --config")
    cfg = load_config(args.config)
    for attr, field_name in (("seed", "seed"), ("workers", "workers"), ("feature", "feature"),
                             ("model", "model"), ("train_on", "train_on"), ("K", "gmm_k"),
                             ("per_dataset", "per_dataset")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, field_name, v)
    return cfg.validate(need_manifest=not getattr(args, "scores", None))


def cmd_simulate(args) -> int:
    audio = load_audio(args.inp)
    spec = lookup_codec(args.codec)
    cond = ChannelCondition(spec, LossModel(args.plr, args.loss_model, args.seed),
                            concealment=args.concealment, packet_ms=args.frame_ms)
    out, mask = transmit_with_mask(audio, cond, scratch_key=args.inp.stem)
    write_wav(args.out, out)
    print(f"{args.out}: codec={spec.name} plr={args.plr:g} seed={args.seed} "
          f"packets={mask.size} lost={int(mask.sum())} ({mask.mean() if mask.size else 0.0:.2%})")
    return 0


def cmd_demo(args) -> int:
    from .demo import make_demo_corpus

    manifest = make_demo_corpus(args.out / "corpus", args.per_class, args.seed)
    cfg_path = write_config(args.out / "demo.ini", manifest.relative_to(args.out), "work", args.seed,
                            per_dataset=max(1, args.per_class // 2))
    print(f"demo corpus: {manifest}")
    print(f"config: {cfg_path}")
    if args.run:
        cfg = load_config(cfg_path).validate()
        _print(run_all(cfg))
    return 0


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


STAGES = {
    "build-addc": lambda cfg, a: stage_build_addc(cfg, a.force),
    "augment": lambda cfg, a: stage_augment(cfg, a.force),
    "features": lambda cfg, a: stage_features(cfg, a.force),
    "train": lambda cfg, a: stage_train(cfg, a.force),
    "eval": lambda cfg, a: stage_eval(cfg, a.force, a.scores),
    "report": lambda cfg, a: stage_report(cfg),
    "run": lambda cfg, a: run_all(cfg, a.force),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.version:
            info = toolchain()
            if args.config is not None:
                cfg = load_config(args.config)
                info["config"] = str(args.config)
                info["config_digest"] = hashlib.sha256(cfg.source.encode()).hexdigest()
            for k, v in info.items():
                print(f"{k} {v}")
            return 0
        if args.cmd is None:
            parser.print_usage(sys.stderr)
            return 2
        if args.cmd == "simulate":
            return cmd_simulate(args)
        if args.cmd == "demo":
            return cmd_demo(args)
        _print(STAGES[args.cmd](_config(args), args))
        return 0
    except ConfigError as e:
        print(f"addbench: config error: {e}", file=sys.stderr)
        return 2
    except (AddBenchError, OSError, ValueError) as e:
        print(f"addbench: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
