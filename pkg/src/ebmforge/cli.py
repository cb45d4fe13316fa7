"""Command-line entry point: ``ebmforge <verb> [options]``.

Verbs: train, sample, eval-ood, compose, verify, truncation-report.

Every verb accepts ``--config FILE``, repeatable ``--set key=value`` overrides
and ``--out DIR``. Without ``--out`` results go to ``$EBMFORGE_OUT`` (default
``ebmforge-runs``). Each run records its resolved configuration in
``effective_config.txt`` inside the output directory.

Exit status: 0 success, 1 runtime failure or divergence, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError
from .data import ATTRIBUTE_PREDICATES, IdxFormatError
from .evaluation import composition_satisfaction, compare_truncation, energies, ood_report, write_ood_report
from .model import ComposedEnergy
from .sampler import sample_model, write_samples
from .trainer import ConfigError, TrainConfig, data_box, format_config, load_config, load_models, parse_config, train

OUT_ENV = "EBMFORGE_OUT"
DEFAULT_OUT = "ebmforge-runs"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("ebmforge")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file with 'key = value' lines")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or {DEFAULT_OUT})")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rounds", type=int, default=10, help="augment-then-Langevin rounds (default 10)")
    p.add_argument("--count", type=int, default=256, help="number of chains (default 256)")
    p.add_argument("--live", action="store_true", help="use live instead of EMA parameters")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebmforge", description="Energy-based model training and evaluation.")
    sub = parser.add_subparsers(dest="verb", metavar="verb")
    sub.required = True

    p = sub.add_parser("train", help="train a model, writing metrics.csv and a checkpoint")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", help="draw samples from a trained model")
    _common(p)
    _sampling(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.ebm)")
    p.add_argument("--condition", type=int, help="condition index for conditional models")

    p = sub.add_parser("eval-ood", help="AUROC of energy scores against a shifted copy of the data")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.ebm)")
    p.add_argument("--shift", default="3,3", help="translation of the out-of-distribution set (default 3,3)")
    p.add_argument("--count", type=int, default=2000, help="samples per split (default 2000)")
    p.add_argument("--live", action="store_true", help="use live instead of EMA parameters")

    p = sub.add_parser("compose", help="train or load conditional models and sample their sum")
    _common(p)
    _sampling(p)
    p.add_argument("--attrs", default="x0_pos,x1_pos", help="comma-separated attributes (default x0_pos,x1_pos)")
    p.add_argument("--checkpoints", help="comma-separated checkpoints, one per attribute; trains when omitted")

    p = sub.add_parser("verify", help="run the acceptance checks")
    _common(p)
    p.add_argument("--quick", action="store_true", help="skip the checks that train models")
    p.add_argument("--check", action="append", metavar="NAME", help="run only checks whose name contains NAME")

    p = sub.add_parser("truncation-report", help="truncated vs full backprop through 1-3 Langevin steps")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint path (random initialisation when omitted)")
    p.add_argument("--batch", type=int, default=64, help="number of chains (default 64)")
    return parser


def _outdir(args) -> str:
    out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return out


def _config(args) -> TrainConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        return load_config(args.config, args.overrides)
    return parse_config("", args.overrides)


def _write_effective(out: str, cfg: TrainConfig, verb: str, extra: dict | None = None) -> None:
    lines = [f"# verb: {verb}"]
    lines += [f"# {k}: {v}" for k, v in (extra or {}).items()]
    with open(os.path.join(out, "effective_config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n" + format_config(cfg))


def _checkpoint(args, out: str) -> str:
    path = args.checkpoint or os.path.join(out, "checkpoint.ebm")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_train(args, cfg: TrainConfig, out: str) -> int:
    _write_effective(out, cfg, "train", {"resume": args.resume} if args.resume else None)
    res = train(cfg, out, resume=args.resume)
    print(f"trained {res.iterations_run} iterations; metrics {res.metrics_path}; checkpoint {res.checkpoint_path}")
    if res.diverged:
        print("training diverged; see the '# diverged' line in the metrics file", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sample(args, cfg: TrainConfig, out: str) -> int:
    ckpt = _checkpoint(args, out)
    _write_effective(out, cfg, "sample", {"checkpoint": ckpt, "rounds": args.rounds, "count": args.count,
                                          "live": args.live, "condition": args.condition})
    live, ema, ds = load_models(cfg, ckpt)
    model = live if args.live else ema
    box = data_box(ds)
    aug = cfg.augmentation("grid" if ds.kind == "grid" else "vector", box)
    x = sample_model(model, aug, cfg.langevin(box), args.rounds, np.random.default_rng([cfg.seed, 1]),
                     batch_size=args.count, init_box=box, sample_shape=ds.sample_shape,
                     condition=args.condition)
    paths = write_samples(out, x, box)
    print(f"wrote {len(x)} samples to {paths[0] if len(paths) == 1 else out}")
    return EXIT_OK


def cmd_eval_ood(args, cfg: TrainConfig, out: str) -> int:
    ckpt = _checkpoint(args, out)
    shift = np.array([float(v) for v in args.shift.split(",")])
    _write_effective(out, cfg, "eval-ood", {"checkpoint": ckpt, "shift": args.shift, "count": args.count,
                                            "live": args.live})
    live, ema, ds = load_models(cfg, ckpt)
    if ds.kind == "grid":
        raise ConfigError("eval-ood shifts vector data; grid datasets are not supported")
    from .data import make_dataset

    fresh = make_dataset(cfg.dataset, args.count, cfg.seed + 1, cfg.dataset_path).samples
    other = make_dataset(cfg.dataset, args.count, cfg.seed + 2, cfg.dataset_path).samples + shift
    model = live if args.live else ema
    report = ood_report(model, fresh, other)
    write_ood_report(out, report, energies(model, fresh), energies(model, other))
    print(f"AUROC {report.auroc:.4f} (in {report.n_in}, out {report.n_out})")
    return EXIT_OK


def cmd_compose(args, cfg: TrainConfig, out: str) -> int:
    attrs = [a.strip() for a in args.attrs.split(",") if a.strip()]
    unknown = [a for a in attrs if a not in ATTRIBUTE_PREDICATES]
    if unknown:
        raise ConfigError(f"unknown attribute(s) {unknown}; choose from {sorted(ATTRIBUTE_PREDICATES)}")
    ckpts = args.checkpoints.split(",") if args.checkpoints else None
    if ckpts is not None and len(ckpts) != len(attrs):
        raise ConfigError("--checkpoints needs one path per attribute")
    _write_effective(out, cfg, "compose", {"attrs": args.attrs, "checkpoints": args.checkpoints,
                                           "rounds": args.rounds, "count": args.count, "live": args.live})
    members, ds = [], None
    for i, attr in enumerate(attrs):
        sub = parse_config(format_config(cfg), [f"model.condition={attr}", f"seed={cfg.seed + i}"])
        if ckpts is None:
            subdir = os.path.join(out, attr)
            os.makedirs(subdir, exist_ok=True)
            _write_effective(subdir, sub, "train")
            res = train(sub, subdir)
            if res.diverged:
                print(f"training for {attr} diverged", file=sys.stderr)
            path = res.checkpoint_path
        else:
            if not os.path.exists(ckpts[i]):
                raise FileNotFoundError(f"checkpoint not found: {ckpts[i]}")
            path = ckpts[i]
        live, ema, ds = load_models(sub, path, ds)
        members.append(((live if args.live else ema), 1))
    if ds.kind == "grid":
        raise ConfigError("composition is defined for vector data")
    box = data_box(ds)
    comp = ComposedEnergy(tuple(members))
    x = sample_model(comp, cfg.augmentation("vector", box), cfg.langevin(box), args.rounds,
                     np.random.default_rng([cfg.seed, 2]), batch_size=args.count, init_box=box,
                     sample_shape=ds.sample_shape)
    write_samples(out, x, box)
    preds = [ATTRIBUTE_PREDICATES[a] for a in attrs]
    both = composition_satisfaction(x, preds)
    with open(os.path.join(out, "composition_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("predicate,fraction\n")
        for a, p in zip(attrs, preds):
            fh.write(f"{a},{composition_satisfaction(x, [p])!r}\n")
        fh.write(f"all,{both!r}\n")
    with open(os.path.join(out, "composition_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{100 * both:.1f}% of {len(x)} samples satisfy {' and '.join(attrs)}\n")
    print(f"{100 * both:.1f}% of samples satisfy {' and '.join(attrs)}")
    return EXIT_OK


def cmd_verify(args, cfg: TrainConfig, out: str) -> int:
    from .verify import CHECKS, QUICK, VerifyContext, run_checks

    names = list(QUICK) if args.quick else list(CHECKS)
    if args.check:
        names = [n for n in names if any(s in n for s in args.check)]
        if not names:
            raise ConfigError(f"no check matches {args.check}")
    _write_effective(out, cfg, "verify", {"checks": "; ".join(names)})
    results = run_checks(names, VerifyContext(os.path.join(out, "verify")))
    failed = [r for r in results if not r.passed]
    with open(os.path.join(out, "verify_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("check,passed,seconds,detail\n")
        for r in results:
            fh.write(f"{r.name},{str(r.passed).lower()},{r.seconds:.2f},\"{r.detail}\"\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_truncation(args, cfg: TrainConfig, out: str) -> int:
    from .data import make_dataset
    from .trainer import build_model

    ds = make_dataset(cfg.dataset, max(cfg.dataset_size, args.batch), cfg.seed, cfg.dataset_path)
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        model, _, _ = load_models(cfg, args.checkpoint, ds)
    else:
        model = build_model(cfg, ds)
    _write_effective(out, cfg, "truncation-report", {"checkpoint": args.checkpoint, "batch": args.batch})
    rng = np.random.default_rng([cfg.seed, 3])
    x0, _ = ds.batch(rng, args.batch)
    box = data_box(ds) if cfg.langevin_clamp else None
    cond = rng.integers(0, model.condition_dim, size=args.batch) if model.conditional else None
    rows = ["steps,cosine,norm_ratio,norm_truncated,norm_full"]
    print(f"{'K':>2} {'cosine':>10} {'norm ratio':>11}")
    for k in (1, 2, 3):
        res = compare_truncation(model, x0, k, cfg.langevin_step_size, rng=np.random.default_rng([cfg.seed, 4, k]),
                                 noise_sigma=cfg.langevin_noise, condition=cond, box=box)
        rows.append(f"{k},{res['cosine']!r},{res['norm_ratio']!r},{res['norm_truncated']!r},{res['norm_full']!r}")
        print(f"{k:>2} {res['cosine']:>10.6f} {res['norm_ratio']:>11.6f}")
    with open(os.path.join(out, "truncation_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval-ood": cmd_eval_ood,
    "compose": cmd_compose,
    "verify": cmd_verify,
    "truncation-report": cmd_truncation,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = _outdir(args)
        return COMMANDS[args.verb](args, cfg, out)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"ebmforge: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, IdxFormatError) as exc:
        print(f"ebmforge: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"ebmforge: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
