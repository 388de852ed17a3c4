"""Command line: nicrb {train-codec, attack, defend-eval, metrics, grid, report}."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import codecs as cdc
from . import defenses as dfn
from . import harness
from . import metrics as met
from .imageio import CorpusError, load_image, save_png


def corpus_arg(value: str):
    """A directory, or ``synthetic:N[:SIZE[:SEED]]``."""
    if value.startswith("synthetic"):
        parts = value.split(":")[1:]
        keys = ("n", "size", "seed")
        return {"synthetic": {k: int(v) for k, v in zip(keys, parts)}}
    return value


def _images(args) -> tuple[list[str], list[np.ndarray]]:
    if getattr(args, "image", None):
        return [Path(p).stem for p in args.image], [load_image(p) for p in args.image]
    if getattr(args, "corpus", None):
        return harness.load_corpus(corpus_arg(args.corpus), args.size)
    raise SystemExit("need --image or --corpus")


def cmd_train(args) -> int:
    _, images = harness.load_corpus(corpus_arg(args.corpus), args.size)
    model = cdc.CodecModel(args.arch, cdc.init_params(args.arch, args.seed), lam=args.lam, seed=args.seed,
                           id=args.id or f"{args.arch}-{args.lam:g}", bitrate_label=args.bitrate)
    model = cdc.train(model, images, args.lam, steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed,
                      log_every=args.log_every)
    path = cdc.save(model, args.out)
    print(json.dumps({"checkpoint": str(path), **model.manifest}, indent=1))
    return 0


def _spec(args) -> atk.AttackSpec:
    loss = atk.LossTarget(args.loss, y_only=args.y_only, bpp_direction=args.bpp_direction)
    opts = json.loads(args.options) if args.options else {}
    if args.preset is not None:
        return atk.AttackSpec.from_preset(args.algorithm, loss, args.preset, seed=args.seed, **opts)
    return atk.AttackSpec(args.algorithm, loss, args.epsilon, args.step, args.iterations, args.seed, opts)


def cmd_attack(args) -> int:
    model = cdc.load(args.model)
    spec = _spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids, images = _images(args)
    rows = []
    for image_id, x in zip(ids, images):
        if args.defense:
            ex = atk.attack_defended(spec, model, args.defense, x)
        else:
            ex = atk.run_attack(spec, model, x)
        save_png(out / f"{image_id}_adv.png", ex.x_adv)
        side = {"image": image_id, "algorithm": spec.algorithm, "loss": spec.loss.label,
                "epsilon": spec.epsilon, "step": spec.step, "iterations": spec.iterations, "seed": spec.seed,
                "linf": ex.linf, "l2": ex.l2, "loss_trace": ex.loss_trace,
                "delta_psnr": met.delta_score("psnr", model, x, ex.x_adv).value}
        (out / f"{image_id}_adv.json").write_text(json.dumps(side, indent=1))
        rows.append({k: side[k] for k in ("image", "linf", "l2", "delta_psnr")})
    print(json.dumps(rows, indent=1))
    return 0


def cmd_defend_eval(args) -> int:
    model = cdc.load(args.model)
    ids, images = _images(args)
    adv = [load_image(p) for p in args.adversarial] if args.adversarial else None
    defended = dfn.DefendedCodec(model, args.defense, seed=args.seed)
    rows = []
    for i, (image_id, x) in enumerate(zip(ids, images)):
        row = {"image": image_id, "psnr_codec": met.psnr(x, model(x)), "psnr_defended": met.psnr(x, defended(x))}
        if adv is not None:
            row["delta_psnr"] = met.delta_score("psnr", model, x, adv[i]).value
            row["delta_psnr_defended"] = met.delta_score("psnr", defended, x, adv[i]).value
        rows.append(row)
    print(json.dumps(rows, indent=1))
    return 0


def cmd_metrics(args) -> int:
    ref, test = load_image(args.reference), load_image(args.test)
    out = {}
    for m in args.metric:
        if m == "color":
            out[m] = met.color_artifact(ref, test)
        elif m == "texture":
            out[m] = met.texture_artifact(ref, test)
        else:
            out[m] = float(met.get_metric(m)(ref, test))
    print(json.dumps(out, indent=1))
    return 0


def cmd_grid(args) -> int:
    flags = {"corpus": corpus_arg(args.corpus) if args.corpus else None, "output": args.output,
             "root_seed": args.root_seed, "workers": args.workers}
    config = harness.RunConfig.from_file(args.config, **flags)
    result = harness.run_grid(config)
    files = harness.emit_reports(result)
    failed = sum(r.get("status") != "ok" for r in result.records)
    print(json.dumps({"records": len(result.records), "failed": failed, "skipped_groups": result.skipped,
                      "files": [str(f) for f in files]}, indent=1))
    return 0


def cmd_report(args) -> int:
    records = harness.load_records(args.records)
    files = harness.emit_reports(records, args.out)
    print("\n".join(str(f) for f in files))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nicrb", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-codec", help="train a toy codec")
    t.add_argument("--arch", choices=cdc.ARCHITECTURES, default="factorized")
    t.add_argument("--lam", type=float, default=cdc.DEFAULT_LAMBDAS[0])
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--corpus", default="synthetic:100:64:1000")
    t.add_argument("--size", type=int)
    t.add_argument("--id", default="")
    t.add_argument("--bitrate", default="")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack images with one spec")
    a.add_argument("--model", required=True)
    a.add_argument("--image", nargs="*")
    a.add_argument("--corpus")
    a.add_argument("--size", type=int)
    a.add_argument("--algorithm", choices=atk.ALGORITHMS, default="ftda")
    a.add_argument("--loss", choices=atk.LOSS_IDS, default="ftda-default")
    a.add_argument("--y-only", action="store_true")
    a.add_argument("--bpp-direction", choices=("increase", "printed"), default="increase")
    a.add_argument("--preset", type=int, choices=range(len(atk.PRESETS)))
    a.add_argument("--epsilon", type=float, default=8 / 255)
    a.add_argument("--step", type=float, default=1 / 255)
    a.add_argument("--iterations", type=int, default=20)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--options", help="JSON object of algorithm options")
    a.add_argument("--defense", help="attack through this defense (defense-aware)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend-eval", help="compare a codec with and without a defense")
    d.add_argument("--model", required=True)
    d.add_argument("--defense", required=True, choices=dfn.DEFENSE_IDS)
    d.add_argument("--image", nargs="*")
    d.add_argument("--corpus")
    d.add_argument("--size", type=int)
    d.add_argument("--adversarial", nargs="*", help="adversarial images, same order as the clean ones")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_defend_eval)

    m = sub.add_parser("metrics", help="full-reference scores of two images")
    m.add_argument("reference")
    m.add_argument("test")
    m.add_argument("--metric", nargs="+", default=["psnr", "ms-ssim"],
                   choices=sorted(met.METRICS) + ["color", "texture"])
    m.set_defaults(func=cmd_metrics)

    g = sub.add_parser("grid", help="run an evaluation grid from a YAML config")
    g.add_argument("--config", required=True)
    g.add_argument("--corpus")
    g.add_argument("--output")
    g.add_argument("--root-seed", type=int)
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_grid)

    r = sub.add_parser("report", help="rebuild reports from a ledger")
    r.add_argument("--records", required=True, help="output directory or ledger.jsonl")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
