"""``mome`` command line: data generation, training, inference, evaluation."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import load_samples, read_volume, write_dataset, write_label
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, FormatError, MomeError
from .eval import activation_profile, evaluate
from .moe import infer
from .nn import ExpertNetwork, Modality, load_checkpoint
from .train import build_mome, load_model, pretrain_expert, train_joint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONTRACT, EXIT_DIVERGED = 0, 1, 2, 3, 4

ABLATIONS = ("random-experts", "flat-gate", "no-curriculum")

log = logging.getLogger("mome")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    overrides.update(extra or {})
    return RunConfig.load(args.config, overrides)


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.spec, {**_overrides(args.set), **({"seed": str(args.seed)} if args.seed is not None else {})})
    out = Path(args.out)
    manifest = write_dataset(out, cfg.phantom, cfg.n_train, cfg.n_test, cfg.n_unseen, cfg.seed)
    cfg.write(out / "run.cfg")
    print(manifest)
    return EXIT_OK


def cmd_pretrain_expert(args) -> int:
    cfg = _config(args)
    modality = Modality.parse(args.modality)
    samples = load_samples(args.data, split="train", modality=modality)
    if not samples:
        raise ContractError(f"{args.data} has no training images of modality {modality.label}")
    expert = ExpertNetwork(modality, cfg.train.base, cfg.train.levels, seed=cfg.seed * 100 + int(modality))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pretrain_expert(expert, samples, cfg.train, ckpt_path=out, log_path=out.with_suffix(".log"))
    cfg.write(out.with_suffix(".cfg"))
    print(out)
    return EXIT_OK


def _ordered_experts(paths) -> list[ExpertNetwork]:
    slots: dict[int, ExpertNetwork] = {}
    for p in paths:
        net = load_checkpoint(p)
        if not isinstance(net, ExpertNetwork) or net.modality is None:
            raise ContractError(f"{p} is not a modality expert checkpoint")
        if int(net.modality) in slots:
            raise ContractError(f"two experts given for modality {net.modality.label}")
        slots[int(net.modality)] = net
    missing = [m.label for m in Modality if int(m) not in slots]
    if missing:
        raise ContractError(f"missing experts for modalities {missing}")
    return [slots[int(m)] for m in Modality]


def cmd_train(args) -> int:
    extra = {}
    ablate = set(args.ablate or [])
    if "no-curriculum" in ablate:
        extra["schedule"] = "off"
    if "flat-gate" in ablate:
        extra["hierarchical"] = "false"
    if "random-experts" in ablate:
        extra["random_experts"] = "true"
    cfg = _config(args, extra)
    if cfg.train.random_experts:
        experts = None
    else:
        if not args.experts:
            raise ConfigError("--experts is required unless --ablate random-experts")
        experts = _ordered_experts(args.experts)
    model = build_mome(cfg.train, experts)
    samples = load_samples(args.data, split="train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "run.cfg")
    train_joint(model, samples, cfg.train, log_path=out / "train.log", ckpt_dir=out)
    print(out)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.model)
    vol = read_volume(args.__dict__["in"])
    mask = infer(model.experts, model.gate, vol)
    write_label(args.out, mask, vol.modality, vol.spacing)
    print(args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    samples = load_samples(args.data, split=args.split)
    if not samples:
        raise ContractError(f"{args.data} has no images in split {args.split!r}")
    report = evaluate(model, samples)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.write(args.report)
    print("\n".join(report.lines()[:3]))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model = load_model(args.model)
    samples = load_samples(args.data, split=args.split)
    prof = activation_profile(model, samples, level=args.level)
    sys.stdout.write(prof.table())
    for i in prof.inactive_experts():
        print(f"inactive expert: {Modality(i).label}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mome", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="write synthetic phantom datasets and a manifest")
    p.add_argument("--spec", help="key = value phantom/run configuration")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-expert", help="train one modality expert")
    p.add_argument("--modality", required=True)
    p.add_argument("--data", required=True, help="manifest.tsv")
    p.add_argument("--out", required=True, help="checkpoint path")
    common(p)
    p.set_defaults(func=cmd_pretrain_expert)

    p = sub.add_parser("train", help="joint gate training with curriculum")
    p.add_argument("--experts", nargs="*", default=[])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice report at image/task/dataset level")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="per-modality gate activation profile")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--level", type=int, default=1)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MomeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
