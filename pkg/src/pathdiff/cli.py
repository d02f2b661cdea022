"""``pathdiff`` command line: gen-data, train, sample, trace, ablate, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O or file-format error.  Every command writes ``manifest.json`` into
``--out`` before doing any work.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

from . import ablation, routes, verify
from .data import SceneConfig, gen_dataset, gen_scene, read_manifest, write_manifest
from .errors import (AllocationError, ConfigError, ContractError, DimensionError, FormatError,
                     GenerationError)
from .model import assemble_model
from .pnm import write_pgm, write_ppm
from .text import COLORS, DEFAULT_VOCAB
from .train import (MetricsWriter, SamplerConfig, TrainConfig, build_configs, format_config,
                    load_checkpoint, make_optimizer, make_schedule, parse_config_text, sample,
                    save_checkpoint, train)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DATASET_FILE = "dataset.jsonl"
SCENE_FILE = "scene_config.json"


def content_hash(text):
    """Git blob id of ``text``."""
    raw = text.encode() if isinstance(text, str) else text
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str
    seed: int
    out: str
    config_hash: str
    settings: dict = field(default_factory=dict)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _start(args, command, config_text, seed):
    manifest = RunManifest(command, getattr(args, "config", None) or "", int(seed), args.out,
                           content_hash(config_text), _settings(args))
    manifest.write(args.out)
    return manifest


def _settings(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _scene_config(data_dir):
    path = os.path.join(data_dir, SCENE_FILE)
    if not os.path.exists(path):
        return SceneConfig()
    with open(path) as fh:
        return SceneConfig(**json.load(fh))


def _raw_config(args):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw.update(parse_config_text(fh.read()))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("warmup", "warmup"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            raw[key] = str(value)
    return raw


def _print_rows(rows):
    for line in rows:
        print(line)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    scene_cfg = SceneConfig(divisor=args.divisor, n_y=args.n_y)
    text = json.dumps({"count": args.count, "divisor": args.divisor, "n_y": args.n_y}, sort_keys=True)
    _start(args, "gen-data", text, args.seed)
    records = gen_dataset(args.count, args.seed, scene_cfg)
    write_manifest(os.path.join(args.out, DATASET_FILE), records)
    with open(os.path.join(args.out, SCENE_FILE), "w") as fh:
        json.dump({"divisor": args.divisor, "n_y": args.n_y}, fh)
    if args.images:
        img_dir = os.path.join(args.out, "images")
        os.makedirs(img_dir, exist_ok=True)
        for i, rec in enumerate(records[:args.images]):
            scene = gen_scene(rec["seed"], scene_cfg)
            write_ppm(os.path.join(img_dir, f"scene_{i:04d}.ppm"), scene.image)
            write_pgm(os.path.join(img_dir, f"edge_{i:04d}.pgm"), scene.edge_map)
    print(f"wrote {len(records)} scene records to {args.out}")
    return EXIT_OK


def cmd_train(args):
    raw = _raw_config(args)
    scene_cfg = _scene_config(args.data)
    if args.resume:
        model, opt = load_checkpoint(args.resume)
        _, tcfg = build_configs({k: v for k, v in raw.items() if k in {f.name for f in fields(TrainConfig)}})
        mcfg = model.cfg
        if opt is None:
            opt = make_optimizer(model, tcfg)
    else:
        mcfg, tcfg = build_configs(raw)
        if mcfg.n_y != scene_cfg.n_y:
            raise ConfigError(f"model n_y={mcfg.n_y} differs from dataset n_y={scene_cfg.n_y}")
        model = assemble_model(mcfg, tcfg.seed)
        opt = make_optimizer(model, tcfg)
    config_text = format_config(mcfg, tcfg)
    _start(args, "train", config_text, tcfg.seed)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(config_text)
    records = read_manifest(os.path.join(args.data, DATASET_FILE))
    start = opt.step_count
    writer = MetricsWriter(os.path.join(args.out, "metrics.csv"))

    def on_step(step, m):
        writer.write(m)
        if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            save_checkpoint(model, opt, os.path.join(args.out, f"ckpt_{step:06d}.pdc"))

    try:
        history = train(model, records, make_schedule(mcfg), opt, tcfg, scene_cfg, start, on_step)
    finally:
        writer.close()
    save_checkpoint(model, opt, os.path.join(args.out, "final.pdc"))
    if history:
        last = history[-1]
        print(f"step {last['step']}: L={last['L']:.4f} L_denoise={last['L_denoise']:.4f} "
              f"L_edge={last['L_edge']:.4f}")
    return EXIT_OK


def _sampler(args):
    seed = args.seed if args.seed is not None else 0
    return SamplerConfig(args.sample_steps, args.sampler, args.guidance, seed, args.spacing)


def cmd_sample(args):
    scfg = _sampler(args)
    _start(args, "sample", json.dumps(asdict(scfg), sort_keys=True) + args.caption, args.seed)
    model, _ = load_checkpoint(args.checkpoint)
    caption = DEFAULT_VOCAB.tokenize(args.caption, model.cfg.n_y)
    scfg.validate(model.cfg.T)
    img = sample(model, caption, scfg, (model.cfg.channels, args.height, args.width))
    path = os.path.join(args.out, "sample.ppm")
    write_ppm(path, img)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_trace(args):
    concepts = [c.strip() for c in args.concepts.split(",") if c.strip()]
    for c in concepts:
        if c not in COLORS:
            raise ConfigError(f"concept {c!r} is not a color word ({', '.join(COLORS)})")
    scfg = _sampler(args)
    _start(args, "trace", json.dumps({"concepts": concepts, **asdict(scfg)}, sort_keys=True), args.seed)
    model, _ = load_checkpoint(args.checkpoint)
    data, traces = routes.collect_route_dataset(model, concepts, args.per_concept, scfg,
                                                (model.cfg.channels, args.height, args.width),
                                                args.seed, args.reduce)
    routes.write_trace_csv(os.path.join(args.out, "traces.csv"), traces)
    routes.write_feature_csv(os.path.join(args.out, "routes.csv"), data)
    routes.write_time_table_csv(os.path.join(args.out, "time_table.csv"), model)
    acc, pred, _ = routes.cross_validate(data, args.folds, model.cfg.space_experts, args.seed)
    control = routes.shuffled_control(data, args.folds, model.cfg.space_experts, args.seed)
    report = routes.route_report(data, pred)
    report += f"# cv_accuracy: {acc:.4f}\n# shuffled_control: {control:.4f}\n# chance: {1 / len(concepts):.4f}\n"
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report)
    print(report, end="")
    return EXIT_OK


def cmd_ablate(args):
    raw = _raw_config(args)
    mcfg, tcfg = build_configs(raw)
    if args.values:
        values = [float(v) if args.knob in ("alpha", "guidance") else int(float(v))
                  for v in args.values.split(",") if v.strip()]
    else:
        values = list(ablation.DEFAULT_VALUES[args.knob])
    config_text = format_config(mcfg, tcfg) + f"knob = {args.knob}\nvalues = {values}\n"
    _start(args, "ablate", config_text, tcfg.seed)
    records = read_manifest(os.path.join(args.data, DATASET_FILE))
    scfg = _sampler(args)
    baseline = None
    if args.checkpoint:
        if args.knob != "guidance":
            raise ConfigError("--checkpoint only applies to the guidance knob; other knobs retrain per value")
        baseline, _ = load_checkpoint(args.checkpoint)
    rows = ablation.run_ablation(args.knob, values, records, mcfg, tcfg, scfg, args.eval_prompts,
                                 (mcfg.channels, args.height, args.width), baseline, _scene_config(args.data))
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "L_denoise_final", "color_alignment", "seconds_per_step"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
    _print_rows(f"{args.knob}={r[0]}: L_denoise={r[1]:.4f} align={r[2]:.3f} s/step={r[3]:.4f}" for r in rows)
    return EXIT_OK


def cmd_verify(args):
    _start(args, "verify", f"suite = {args.suite}\n", 0)
    lines = []

    def out(line):
        print(line)
        lines.append(line)

    ok = verify.run_suite(args.suite, out)
    with open(os.path.join(args.out, "verify.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------- parser


def _add_sampler_flags(p, steps=50):
    p.add_argument("--sample-steps", type=int, default=steps, help="DDIM steps (DDPM always runs T)")
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--spacing", choices=("quadratic", "linear"), default="quadratic",
                   help="DDIM timestep spacing")
    p.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance weight")
    p.add_argument("--height", type=int, default=40)
    p.add_argument("--width", type=int, default=40)


def _add_train_flags(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--steps", type=int, help="optimizer steps to run")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--batch-size", type=int, help="scenes per step")
    p.add_argument("--warmup", type=int, help="linear warmup steps")
    p.add_argument("--checkpoint-every", type=int, help="steps between checkpoints (0 = final only)")


def build_parser():
    parser = argparse.ArgumentParser(prog="pathdiff", allow_abbrev=False,
                                     description="Desk-scale MoE text-to-image diffusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", allow_abbrev=False, help="generate a synthetic scene dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--divisor", type=int, default=16, help="bucket sizes are the full-size buckets / divisor")
    p.add_argument("--n-y", type=int, default=16, help="caption length in tokens")
    p.add_argument("--images", type=int, default=0, help="also dump the first N scenes as PPM + edge PGM")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", allow_abbrev=False, help="train a denoiser")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from (step counter continues)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", allow_abbrev=False, help="generate one image as PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("trace", allow_abbrev=False, help="record routes and classify concepts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--concepts", default=",".join(COLORS))
    p.add_argument("--per-concept", type=int, default=50)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--reduce", choices=("majority", "first", "final"), default="majority")
    p.add_argument("--seed", type=int, default=0)
    _add_sampler_flags(p, steps=4)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("ablate", allow_abbrev=False, help="sweep one knob")
    p.add_argument("--knob", required=True, choices=ablation.KNOBS)
    p.add_argument("--values", help="comma-separated values (default depends on the knob)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="trained baseline for the guidance knob")
    p.add_argument("--eval-prompts", type=int, default=4)
    _add_train_flags(p)
    _add_sampler_flags(p, steps=10)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", allow_abbrev=False, help="run self-check suites")
    p.add_argument("--suite", choices=verify.SUITES, default="all")
    p.add_argument("--out", default="verify_out")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, DimensionError, AllocationError, GenerationError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
