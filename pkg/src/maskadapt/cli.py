"""Command-line entry point.

Subcommands: build-dataset, train, generate, evaluate, ablate,
inspect-checkpoint. Exit codes: 0 success, 1 usage, 2 data error,
3 backend error. Surrogate backends are the default; real ones must be
requested explicitly and fail with exit code 3 when not installed.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backends import (
    PoseSkeleton,
    StickFigureDetector,
    ThresholdSegmenter,
    UnavailableSegmenter,
    load_image_png,
    load_mask_png,
    save_image_png,
    white_page_segmenter,
)
from .checkpoint import CheckpointError, inspect_checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_config, override, to_dict
from .dataset import (
    DatasetError,
    build_dataset,
    eval_cases,
    file_image_source,
    toy_image_source,
    training_samples,
)
from .errors import BackendError, BackendUnavailable
from .evaluation import (
    EvalBackends,
    IdentityGenerator,
    MetricsReport,
    SurrogateClip,
    SurrogateLpips,
    TABLE_COLUMNS,
    COLUMN_TITLES,
    run_eval,
)
from .generate import GenerationRequest, ReferenceInput, Sampler, SamplerCaseGenerator, from_unit, to_unit
from .injection import pixel_mask_to_token_mask
from .surrogate import build_surrogate_stack
from .taxonomy import EDIT_TASKS, ManifestError, RecordError, TagRecord, load_constants, load_taxonomy, read_manifest
from .taxonomy import read_metadata
from .taxonomy.table import TaxonomyError
from .toydata import toy_metadata
from .trainer import Trainer, TrainingDivergedError, freeze_audit, run_training

log = logging.getLogger("maskadapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
CONTROLLERS = {"t2i": "t2i_adapter", "t2i_adapter": "t2i_adapter", "controlnet": "controlnet", "none": "none"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


DATA_ERRORS = (DatasetError, ManifestError, RecordError, TaxonomyError, CheckpointError, ConfigError,
               FileNotFoundError, TrainingDivergedError)


def _setup_logging(out_dir: Path | None, verbose: bool) -> None:
    root = logging.getLogger("maskadapt")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    root.addHandler(h)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _resolve(args, cfg: RunConfig) -> RunConfig:
    cfg = override(cfg, "run", seed=getattr(args, "seed", None))
    if getattr(args, "seed", None) is not None:
        cfg = override(cfg, "train", seed=args.seed)
    if cfg.backend != "surrogate":
        raise BackendUnavailable("only the surrogate diffusion stack ships with this package; "
                                 "set [run] backend = surrogate")
    return cfg


def _stack(cfg: RunConfig):
    d = cfg.data
    return build_surrogate_stack(cfg.train.controller, cfg.base_seed, d.image_size, d.patch, d.timesteps)


def _eval_backends(stack, cfg: RunConfig) -> EvalBackends:
    return EvalBackends(SurrogateClip(stack.vision, stack.text_encoder, cfg.base_seed), SurrogateLpips(stack.vision),
                        white_page_segmenter(), StickFigureDetector(), cfg.eval.min_joints, cfg.eval.akd_pixels)


# --- build-dataset -------------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    cfg = _resolve(args, load_config(args.config))
    cfg.write_resolved(out, "build-dataset")
    taxonomy = load_taxonomy(args.taxonomy)
    constants = load_constants()
    if args.segmenter == "sam3":
        segmenter = UnavailableSegmenter("sam3")
    elif args.segmenter == "threshold":
        segmenter = ThresholdSegmenter(0.5, "above")
    else:
        segmenter = white_page_segmenter()
    if args.pose == "openpose":
        raise BackendUnavailable("openpose backend is not configured; use --pose stick")
    if args.toy:
        records = [TagRecord.from_metadata(r) for r in toy_metadata(args.toy, cfg.seed)]
        source = toy_image_source(cfg.data.image_size, cfg.seed)
    elif args.metadata:
        records = list(read_metadata(args.metadata))
        source = file_image_source(args.images_root or Path(args.metadata).parent)
    else:
        raise UsageError("build-dataset needs --metadata or --toy N")
    tasks = tuple(dict.fromkeys(t for name in args.tasks.split(",") for t in _tasks(name.strip())))
    entries, stats = build_dataset(records, out, taxonomy, constants, source, segmenter, StickFigureDetector(),
                                   cfg.data.prompt_seed, tasks=tasks)
    (out / "build_stats.json").write_text(json.dumps(stats.to_dict(), indent=2), encoding="utf-8")
    log.info("accepted %d of %d records", stats.accepted, stats.seen)
    print(f"manifest: {out / 'manifest.jsonl'} ({stats.accepted} entries)")
    return EXIT_OK


# --- train -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    cfg = _resolve(args, load_config(args.config))
    if args.controller:
        cfg = override(cfg, "train", controller=CONTROLLERS[args.controller])
    cfg = override(cfg, "train", steps=args.steps, scope=args.scope)
    cfg.write_resolved(out, "train")
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    if not entries:
        raise DatasetError(f"{manifest} has no entries")
    stack = _stack(cfg)
    samples = training_samples(entries, manifest.parent, stack.vision.spec(cfg.train.k), cfg.data.mask_threshold,
                               cfg.data.cls_foreground)
    trainer = Trainer(stack, cfg.train)
    meta = to_dict(cfg)

    def checkpoint(tr):
        path = save_checkpoint(out / f"adapter_step{tr.step_count:06d}.ckpt", tr.aggregator, tr.projections,
                               tr.step_count, meta, tr.optimizer)
        log.info("wrote %s", path)

    t0 = time.time()
    history = run_training(trainer, samples, cfg.train.steps, on_checkpoint=checkpoint)
    save_checkpoint(out / "adapter.ckpt", trainer.aggregator, trainer.projections, trainer.step_count, meta,
                    trainer.optimizer)
    with open(out / "loss.tsv", "w", encoding="utf-8") as f:
        f.write("step\tloss\n")
        for i, v in enumerate(history, start=1):
            f.write(f"{i}\t{v:.8g}\n")
    report = freeze_audit(trainer)
    (out / "freeze_audit.json").write_text(json.dumps({"ok": report.ok, "before": report.before,
                                                       "after": report.after}, indent=2), encoding="utf-8")
    log.info("trained %d steps in %.1fs; freeze audit passed", trainer.step_count, time.time() - t0)
    print(f"checkpoint: {out / 'adapter.ckpt'}")
    return EXIT_OK


# --- generate ----------------------------------------------------------------------------

def _load_sampler(path: str, scope_flag: str | None, renormalize: bool = False):
    agg, proj, info, _ = load_checkpoint(path)
    if scope_flag and scope_flag != info.scope:
        raise CheckpointError(f"checkpoint scope {info.scope!r} does not match --scope {scope_flag}")
    cfg = from_dict(info.config) if info.config else RunConfig()
    stack = _stack(cfg)
    missing = [s for s in info.sites if s not in {x.site_id for x in stack.unet.sites}]
    if missing:
        raise CheckpointError(f"checkpoint sites {missing} do not exist in the denoiser")
    return Sampler(stack, agg, proj, cfg.train.neg_bias, renormalize), cfg, info


def cmd_generate(args) -> int:
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    if len(args.extra_ref) != len(args.extra_mask):
        raise UsageError("every --extra-ref needs a matching --extra-mask")
    sampler, cfg, info = _load_sampler(args.checkpoint, args.scope)
    cfg = _resolve(args, cfg)
    cfg = override(cfg, "generate", n_samples=args.n, gamma=args.gamma, guidance=args.guidance)
    cfg.write_resolved(out, "generate")
    if args.base:
        sampler = Sampler(sampler.stack)
    spec = sampler.stack.vision.spec(info.k)
    refs = []
    pairs = [(args.ref, args.mask)] + list(zip(args.extra_ref, args.extra_mask))
    scales = list(args.scale or [])
    if scales and len(scales) != len(pairs):
        raise UsageError(f"--scale given {len(scales)} times for {len(pairs)} references")
    if not args.base:
        for i, (img_path, mask_path) in enumerate(pairs):
            image = load_image_png(img_path)
            mask = load_mask_png(mask_path) if mask_path else np.ones(image.shape[:2], bool)
            tm = pixel_mask_to_token_mask(mask, spec, cfg.data.mask_threshold, cfg.data.cls_foreground,
                                          origin=str(mask_path))
            refs.append(ReferenceInput(from_unit(image), tm, scales[i] if scales else 1.0, str(img_path)))
    skeleton = PoseSkeleton.load(args.pose) if args.pose else None
    g = cfg.generate
    req = GenerationRequest(args.prompt, refs, skeleton, g.n_samples, cfg.seed, g.gamma, g.guidance,
                            g.ddim_steps or None)
    images = to_unit(sampler.sample(req)).double().numpy()
    for i, img in enumerate(images):
        save_image_png(img, out / f"sample_{i:02d}.png")
    prov = req.provenance()
    prov.update({"checkpoint": str(args.checkpoint), "checkpoint_step": info.step, "scope": info.scope,
                 "base_model_only": bool(args.base), "encoder_passes": sampler.encode_calls,
                 "outputs": [f"sample_{i:02d}.png" for i in range(len(images))]})
    (out / "provenance.json").write_text(json.dumps(prov, indent=2), encoding="utf-8")
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


# --- evaluate / ablate -----------------------------------------------------------------------

def _tasks(name: str) -> tuple[str, ...]:
    if name == "all":
        return EDIT_TASKS
    if name not in EDIT_TASKS:
        raise UsageError(f"unknown task {name!r}; choose from {', '.join(EDIT_TASKS)} or all")
    return (name,)


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    if args.generator == "surrogate":
        if not args.checkpoint:
            raise UsageError("--generator surrogate needs --checkpoint")
        sampler, cfg, info = _load_sampler(args.checkpoint, None)
    else:
        cfg = load_config(args.config)
        sampler = None
    cfg = _resolve(args, cfg)
    cfg.write_resolved(out, "evaluate")
    manifest = Path(args.manifest)
    cases = eval_cases(read_manifest(manifest), manifest.parent, _tasks(args.task), cfg.eval.max_cases)
    stack = sampler.stack if sampler else _stack(cfg)
    if args.generator == "identity":
        generator = IdentityGenerator()
    else:
        if args.generator == "base":
            sampler = Sampler(stack)
        g = cfg.generate
        generator = SamplerCaseGenerator(sampler, stack.vision.spec(cfg.train.k), 4, g.gamma, g.guidance,
                                         g.ddim_steps or None, cfg.data.mask_threshold, cfg.seed)
    report = run_eval(cases, generator, _eval_backends(stack, cfg), out)
    print(report.to_text(), end="")
    return EXIT_OK


AXES = {
    "scope": ("full_blocks", "up_blocks"),
    "mask": ("on", "off"),
    "controller": ("t2i_adapter", "controlnet"),
}


def cmd_ablate(args) -> int:
    out = Path(args.out)
    _setup_logging(out, args.verbose)
    cfg = _resolve(args, load_config(args.config))
    cfg = override(cfg, "train", steps=args.steps)
    cfg.write_resolved(out, "ablate")
    axes = [a.strip() for a in args.grid.replace("x", ",").replace("×", ",").split(",") if a.strip()]
    bad = [a for a in axes if a not in AXES]
    if bad or not axes:
        raise UsageError(f"--grid axes must come from {', '.join(AXES)}; got {args.grid!r}")
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    cases = eval_cases(entries, manifest.parent, _tasks(args.task), cfg.eval.max_cases)
    rows = []
    for combo in itertools.product(*(AXES[a] for a in axes)):
        setting = dict(zip(axes, combo))
        run = override(cfg, "train", scope=setting.get("scope"), controller=setting.get("controller"))
        stack = _stack(run)
        threshold = 0.0 if setting.get("mask") == "off" else run.data.mask_threshold
        spec = stack.vision.spec(run.train.k)
        samples = training_samples(entries, manifest.parent, spec, threshold, run.data.cls_foreground)
        trainer = Trainer(stack, run.train)
        run_training(trainer, samples, run.train.steps)
        freeze_audit(trainer)
        sampler = Sampler(stack, trainer.aggregator, trainer.projections, run.train.neg_bias)
        g = run.generate
        gen = SamplerCaseGenerator(sampler, spec, 4, g.gamma, g.guidance, g.ddim_steps or None, threshold, run.seed)
        name = "_".join(f"{k}-{v}" for k, v in setting.items())
        report = run_eval(cases, gen, _eval_backends(stack, run), out / name)
        rows.append((setting, report))
        log.info("ablation %s done", name)
    text = _ablation_table(axes, rows)
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps([{"setting": s, "metrics": r.aggregate} for s, r in rows],
                                                  indent=2), encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _ablation_table(axes, rows: list[tuple[dict, MetricsReport]]) -> str:
    lines = ["\t".join(list(axes) + [COLUMN_TITLES[c] for c in TABLE_COLUMNS])]
    for setting, report in rows:
        vals = report.aggregate
        lines.append("\t".join([setting[a] for a in axes] +
                               [f"{vals[c]:.4f}" if c in vals else "-" for c in TABLE_COLUMNS]))
    return "\n".join(lines) + "\n"


# --- inspect-checkpoint ------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    info = inspect_checkpoint(args.path)
    if args.json:
        print(json.dumps({"version": info.version, "scope": info.scope, "k": info.k, "hidden_dim": info.hidden_dim,
                          "target_dim": info.target_dim, "step": info.step, "sites": info.sites,
                          "tensors": info.tensors, "has_optimizer": info.has_optimizer}, indent=2))
    else:
        print(info.to_text(), end="")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maskadapt", description="Masked reference-image adapter: data, training, sampling, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True, config=True):
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if config:
            sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, help="overrides [run] seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    b = sub.add_parser("build-dataset", help="filter metadata, build prompts, masks, poses and a manifest")
    src = b.add_mutually_exclusive_group()
    src.add_argument("--metadata", help="line-delimited JSON tag metadata")
    src.add_argument("--toy", type=int, metavar="N", help="synthesise N toy characters instead")
    b.add_argument("--images-root", help="directory image paths in the metadata are relative to")
    b.add_argument("--taxonomy", help="tag taxonomy TSV (default: bundled table)")
    b.add_argument("--segmenter", choices=("white-page", "threshold", "sam3"), default="white-page")
    b.add_argument("--pose", choices=("stick", "openpose"), default="stick")
    b.add_argument("--tasks", default="all", help="'all' or a comma-separated list of edit tasks")
    common(b)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train the adapter on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--controller", choices=("t2i", "controlnet", "none"))
    t.add_argument("--scope", choices=("full_blocks", "up_blocks"))
    t.add_argument("--steps", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample images from a reference and a prompt")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--ref", required=True, help="reference image (PNG)")
    g.add_argument("--mask", help="subject mask for --ref (PNG); all-foreground when omitted")
    g.add_argument("--extra-ref", action="append", default=[], help="additional reference image")
    g.add_argument("--extra-mask", action="append", default=[], help="mask for the matching --extra-ref")
    g.add_argument("--scale", type=float, action="append", help="per-reference scale, in reference order")
    g.add_argument("--prompt", required=True)
    g.add_argument("--pose", help="pose skeleton text file")
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--gamma", type=float)
    g.add_argument("--guidance", type=float)
    g.add_argument("--scope", choices=("full_blocks", "up_blocks"), help="expected checkpoint scope")
    g.add_argument("--base", action="store_true", help="ignore the adapter and sample the base model")
    common(g, config=False)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="run the structured evaluation tasks")
    e.add_argument("--manifest", required=True)
    e.add_argument("--task", default="all")
    e.add_argument("--generator", choices=("surrogate", "base", "identity"), default="surrogate")
    e.add_argument("--checkpoint")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate over a grid of scope x mask x controller")
    a.add_argument("--manifest", required=True)
    a.add_argument("--grid", default="scope,mask,controller", help="axes, e.g. scope,mask or scopexmaskxcontroller")
    a.add_argument("--task", default="all")
    a.add_argument("--steps", type=int)
    common(a)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect-checkpoint", help="validate a checkpoint and print its contents")
    i.add_argument("path")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
