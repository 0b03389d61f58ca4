"""Command line interface for the inversion pipeline.

Subcommands mirror the pipeline stages:

    faceinv encode-bank  --out BANK [--prompts FILE]
    faceinv train-taa    --manifest M --out-dir DIR
    faceinv train-flp    --manifest M --out-dir DIR [--taa CKPT]
    faceinv attack       --template FILE --taa CKPT --flp CKPT --out IMG
    faceinv evaluate     --manifest M --taa CKPT --flp CKPT --out-dir DIR
    faceinv transfer     --manifest M --taa CKPT --flp CKPT --out-dir DIR
                         [--targets a,b] [--far F] [--protocol P]

All subcommands take ``--config`` (YAML over a profile; defaults to the
``default`` profile), ``--profile``, and ``--seed``. Writing subcommands
hold an exclusive lock on their output directory so concurrent runs cannot
interleave files. Errors exit with status 1 and a one-line diagnostic;
``--debug`` re-raises with the full traceback.
"""

from __future__ import annotations

import argparse
import os
import sys

from filelock import FileLock, Timeout

from . import adapter, projector, semantics, training
from .attack import load_template, run_attack
from .config import load_config, stage_seed
from .manifest import load_manifest, save_image
from .pipeline import (
    build_run_backends,
    build_run_bank,
    evaluate_stage,
    train_flp_stage,
    train_taa_stage,
    transfer_stage,
)
from .reports import write_records

LOCK_NAME = ".faceinv.lock"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config overriding a profile")
    p.add_argument("--profile", choices=("default", "toy"),
                   help="base profile (overrides the file's choice)")
    p.add_argument("--seed", type=int, help="run seed overriding the config")
    p.add_argument("--debug", action="store_true", help="full tracebacks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceinv",
        description="Face template inversion: train, attack, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode-bank", help="encode a prompt bank once")
    p.add_argument("--prompts", help="YAML prompt file (default: packaged bank)")
    p.add_argument("--out", required=True, help="output bank file")
    _add_common(p)

    p = sub.add_parser("train-taa", help="fit the template-to-attribute adapter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("train-flp", help="adversarially train the latent projector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--taa", help="adapter checkpoint (default: OUT_DIR/taa.ckpt)")
    _add_common(p)

    p = sub.add_parser("attack", help="invert one leaked template")
    p.add_argument("--template", required=True, help="template file (.tpl or .txt)")
    p.add_argument("--taa", required=True)
    p.add_argument("--flp", required=True)
    p.add_argument("--out", required=True, help="output image (.npy or .png)")
    p.add_argument("--noise-seed", type=int, default=None,
                   help="noise seed (default: derived from the run seed)")
    _add_common(p)

    p = sub.add_parser("evaluate", help="full attack evaluation on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taa", required=True)
    p.add_argument("--flp", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("transfer", help="evaluate against other target systems")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taa", required=True)
    p.add_argument("--flp", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--targets", help="comma-separated target embedder ids")
    p.add_argument("--far", type=float, help="FAR level (default: first configured)")
    p.add_argument("--protocol", choices=("type1", "type2"), default="type1")
    _add_common(p)
    return parser


def _load_cfg(args):
    cfg = load_config(args.config, profile=args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _locked(out_dir: str) -> FileLock:
    os.makedirs(out_dir, exist_ok=True)
    lock = FileLock(os.path.join(out_dir, LOCK_NAME))
    try:
        lock.acquire(timeout=0.2)
    except Timeout:
        raise RuntimeError(
            f"output directory {out_dir!r} is locked by another run") from None
    return lock


def _cmd_encode_bank(args) -> int:
    cfg = _load_cfg(args)
    registry = build_run_backends(cfg)
    if args.prompts:
        texts = semantics.load_prompt_file(args.prompts)
    elif cfg.prompt_bank != "default":
        texts = semantics.load_prompt_file(cfg.prompt_bank)
    else:
        texts = semantics.default_prompt_texts()
    bank = semantics.build_bank(texts, registry.vl_encoder)
    semantics.save_bank(args.out, bank)
    n = sum(len(bank.prompts[r]) for r in bank.region_order)
    print(f"encoded {n} prompts over {bank.n_regions} regions -> {args.out}")
    return 0


def _cmd_train_taa(args) -> int:
    cfg = _load_cfg(args)
    lock = _locked(args.out_dir)
    with lock:
        registry = build_run_backends(cfg)
        bank = build_run_bank(cfg, registry)
        manifest = load_manifest(args.manifest)
        taa, history = train_taa_stage(cfg, manifest, registry, bank)
        out = os.path.join(args.out_dir, "taa.ckpt")
        adapter.save_taa(out, taa)
        write_records(os.path.join(args.out_dir, "taa_history.jsonl"),
                      [{"epoch": i, "loss": loss} for i, loss in enumerate(history)])
        print(f"adapter trained for {len(history)} epochs "
              f"(final loss {history[-1]:.6f}) -> {out}")
    return 0


def _cmd_train_flp(args) -> int:
    cfg = _load_cfg(args)
    lock = _locked(args.out_dir)
    with lock:
        registry = build_run_backends(cfg)
        bank = build_run_bank(cfg, registry)
        manifest = load_manifest(args.manifest)
        taa_path = args.taa or os.path.join(args.out_dir, "taa.ckpt")
        taa = adapter.load_taa(taa_path)
        log_path = os.path.join(args.out_dir, "train_log.jsonl")
        if os.path.exists(log_path):
            os.remove(log_path)   # logs are append-only within a run
        flp, critic, history = train_flp_stage(cfg, manifest, registry, bank,
                                               taa, log_path=log_path)
        flp_out = os.path.join(args.out_dir, "flp.ckpt")
        projector.save_flp(flp_out, flp)
        training.save_critic(os.path.join(args.out_dir, "critic.ckpt"), critic)
        final = history[-1].losses["total_loss"]
        print(f"projector trained for {len(history)} steps "
              f"(final loss {final:.6f}) -> {flp_out}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    registry = build_run_backends(cfg)
    taa = adapter.load_taa(args.taa)
    flp = projector.load_flp(args.flp)
    template = load_template(args.template)
    noise_seed = (args.noise_seed if args.noise_seed is not None
                  else stage_seed(cfg.seed, "attack"))
    image = run_attack(template, taa, flp, registry, noise_seed,
                       enable_attr_embedding=cfg.ablation.enable_attr_embedding)
    save_image(args.out, image)
    print(f"reconstructed {template.dim}-d template from "
          f"{template.source_model_id} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    lock = _locked(args.out_dir)
    with lock:
        registry = build_run_backends(cfg)
        bank = build_run_bank(cfg, registry)
        manifest = load_manifest(args.manifest)
        taa = adapter.load_taa(args.taa)
        flp = projector.load_flp(args.flp)
        summary = evaluate_stage(cfg, manifest, registry, bank, taa, flp,
                                 out_dir=args.out_dir)
        for rep in summary["reports"]:
            head = rep.points[0]
            print(f"{rep.protocol} vs {rep.f_target}: "
                  f"TAR@FAR={head.far:g} = {head.tar:.4f} "
                  f"({rep.n_genuine} genuine / {rep.n_impostor} impostor)")
        print(f"reports written to {args.out_dir}")
    return 0


def _cmd_transfer(args) -> int:
    cfg = _load_cfg(args)
    lock = _locked(args.out_dir)
    with lock:
        registry = build_run_backends(cfg)
        manifest = load_manifest(args.manifest)
        taa = adapter.load_taa(args.taa)
        flp = projector.load_flp(args.flp)
        if args.targets:
            targets = [t.strip() for t in args.targets.split(",") if t.strip()]
        else:
            targets = list(cfg.eval.f_targets) or sorted(registry.fr_embedders)
        far = args.far if args.far is not None else cfg.eval.far_levels[0]
        tm = transfer_stage(cfg, manifest, registry, taa, flp, targets, far,
                            protocol=args.protocol, out_dir=args.out_dir)
        from .reports import render_transfer
        print(render_transfer(tm), end="")
    return 0


_COMMANDS = {
    "encode-bank": _cmd_encode_bank,
    "train-taa": _cmd_train_taa,
    "train-flp": _cmd_train_flp,
    "attack": _cmd_attack,
    "evaluate": _cmd_evaluate,
    "transfer": _cmd_transfer,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        if args.debug:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
