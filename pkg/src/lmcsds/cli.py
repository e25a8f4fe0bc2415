"""Command line for the desk-scale LMC-SDS toolkit.

Every subcommand writes into a fresh directory
``<workdir>/<subcommand>/<digest>-<timestamp>/`` holding the exact config used.
Exit codes: 0 success, 1 validation or dependency error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, config as C
from .corrective import (
    CorrectiveNet,
    TripletCache,
    TripletStream,
    corrective_gates,
    train_corrective,
)
from .data import (
    dataset_checkpoint,
    dataset_from_checkpoint,
    gen_shapes,
    load_checkpoint,
    load_idx,
    save_checkpoint,
    train_heldout_split,
)
from .diffusion import (
    Denoiser,
    DenoiserArch,
    diffusion_loss,
    make_cosine_schedule,
    train_denoiser,
    write_trace_csv,
)
from .distill_translate import (
    TranslatorNet,
    evaluate_translator,
    identity_retrieval,
    train_translator,
    translate,
    write_eval_csv,
)
from .errors import DependencyError, LMCError, NumericError, ValidationError
from .optimize import DirectPixels, LatentGrid, run_edit, run_synthesis, run_variants

log = logging.getLogger("lmcsds")

PRODUCERS = {
    "data": ("gen-data", "train.ckpt"),
    "denoiser": ("train-diffusion", "denoiser.ckpt"),
    "corrective": ("train-corrective", "corrective.ckpt"),
    "probe": ("train-probe", "probe.ckpt"),
    "translator": ("train-translator", "translator.ckpt"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run directories and dependencies


class Run:
    def __init__(self, args, cfg: dict):
        self.cfg = cfg
        self.digest = C.digest(cfg)
        self.workdir = Path(args.workdir)
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime()) + f"{time.time_ns() % 10**9:09d}"
        self.dir = self.workdir / args.command / f"{self.digest[:12]}-{stamp}"
        self.dir.mkdir(parents=True, exist_ok=False)
        (self.dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        self.args = args

    def path(self, name: str) -> Path:
        return self.dir / name

    def meta(self, **extra) -> dict:
        return {"seed": self.cfg["seed"], "config_digest": self.digest, **extra}


def _latest(workdir: Path, producer: str, artifact: str) -> Path | None:
    root = workdir / producer
    if not root.is_dir():
        return None
    runs = [p for p in root.iterdir() if (p / artifact).is_file()]
    if not runs:
        return None
    return max(runs, key=lambda p: p.name.rsplit("-", 1)[-1]) / artifact


def resolve(args, kind: str, required: bool = True) -> Path | None:
    producer, artifact = PRODUCERS[kind]
    explicit = getattr(args, kind, None)
    if explicit:
        p = Path(explicit)
        if p.is_dir():
            p = p / artifact
        if not p.is_file():
            raise DependencyError(f"{kind} not found at {explicit}; produce it with `{producer}`")
        return p
    found = _latest(Path(args.workdir), producer, artifact)
    if found is None and required:
        raise DependencyError(
            f"no {kind} available under {args.workdir}; run `lmcsds {producer}` first "
            f"or pass --{kind} PATH")
    return found


def load_data(args):
    p = resolve(args, "data")
    return (dataset_from_checkpoint(load_checkpoint(p)),
            dataset_from_checkpoint(load_checkpoint(p.parent / "heldout.ckpt")))


def load_denoiser(args) -> Denoiser:
    return Denoiser.from_checkpoint(load_checkpoint(resolve(args, "denoiser")))


def load_corrective(args, required: bool = True) -> CorrectiveNet | None:
    p = resolve(args, "corrective", required)
    return CorrectiveNet.from_checkpoint(load_checkpoint(p)) if p else None


def load_probe(args, required: bool = True):
    p = resolve(args, "probe", required)
    return analysis.ProbeClassifier.from_checkpoint(load_checkpoint(p)) if p else None


def write_rows(rows: list[dict], path) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        w.writerows(rows)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def make_param(cfg: dict, channels: int, oc):
    o = cfg["optimize"]
    if o["parameterization"] == "pixels":
        return DirectPixels(channels, oc.canvas)
    if o["parameterization"] == "latent":
        return LatentGrid(channels, o["grid"], oc.canvas)
    raise ValidationError("optimize.parameterization: expected 'pixels' or 'latent'")


def pick_image(cfg: dict, heldout, index: int | None = None) -> np.ndarray:
    o = cfg["optimize"]
    pool = heldout.of_class(o["source_class"])
    if len(pool) == 0:
        raise ValidationError(f"no held-out images of class {o['source_class']}")
    i = o["image_index"] if index is None else index
    return pool.images[i % len(pool)].astype(np.float64)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run):
    d = run.cfg["data"]
    if d["source"] == "shapes":
        data = gen_shapes(run.cfg["seed"], d["count"], d["classes"], d["size"])
    elif d["source"] == "idx":
        data = load_idx(d["idx_images"], d["idx_labels"])
    else:
        raise ValidationError("data.source: expected 'shapes' or 'idx'")
    train, held = train_heldout_split(data, d["heldout_fraction"], run.cfg["seed"])
    save_checkpoint(_stamp(dataset_checkpoint(train), run), run.path("train.ckpt"))
    save_checkpoint(_stamp(dataset_checkpoint(held), run), run.path("heldout.ckpt"))
    analysis.save_grid_png(held.images[:32], run.path("preview.png"))
    return {"train": len(train), "heldout": len(held), "classes": data.num_classes}


def _stamp(ckpt, run: Run):
    ckpt.metadata.update(run.meta())
    return ckpt


def cmd_train_diffusion(run: Run):
    train, held = load_data(run.args)
    sched = make_cosine_schedule(run.cfg["diffusion"]["schedule_knots"])
    tc = C.train_config(run.cfg)
    init, _ = train_denoiser(train, sched, replace(tc, steps=0))
    d, trace = train_denoiser(train, sched, tc)
    save_checkpoint(d.to_checkpoint(run.meta(steps=tc.steps)), run.path("denoiser.ckpt"))
    write_trace_csv(trace, run.path("trace.csv"))
    out = {}
    for name, net in (("init", init), ("trained", d)):
        out[name] = {"cond": float(diffusion_loss(net, held, seed=1, draws=4, conditional=True)),
                     "uncond": float(diffusion_loss(net, held, seed=1, draws=4, conditional=False))}
    write_json(out, run.path("heldout_loss.json"))
    return out


def cmd_train_corrective(run: Run):
    train, held = load_data(run.args)
    d = load_denoiser(run.args)
    cc = C.corrective_config(run.cfg)
    size = run.cfg["corrective"]["triplet_cache_size"]
    cache_path = Path(run.args.triplet_cache) if run.args.triplet_cache else None
    if cache_path is not None and cache_path.is_file():
        source = TripletCache.from_checkpoint(load_checkpoint(cache_path), run.cfg["seed"])
    elif size > 0 or cache_path is not None:
        source = TripletCache.build(TripletStream(d, train, run.cfg["seed"]), size or 20000)
        save_checkpoint(source.to_checkpoint(), cache_path or run.path("triplets.ckpt"))
    else:
        source = TripletStream(d, train, run.cfg["seed"])
    heldout = TripletStream(d, held, run.cfg["seed"] + 1).next_batch(256)
    b, trace = train_corrective(source, cc, train.images.shape[1], heldout=heldout)
    save_checkpoint(b.to_checkpoint(run.meta(steps=cc.steps)), run.path("corrective.ckpt"))
    write_rows(trace, run.path("trace.csv"))
    gates = corrective_gates(d, b, held)
    write_json(gates, run.path("gates.json"))
    return gates


def cmd_train_probe(run: Run):
    train, held = load_data(run.args)
    a = run.cfg["analysis"]
    pc = analysis.ProbeConfig(steps=a["probe_steps"], batch_size=a["probe_batch"],
                              lr=a["probe_lr"], width=a["probe_width"],
                              min_accuracy=a["probe_min_accuracy"], seed=run.cfg["seed"])
    probe = analysis.train_probe(train, held, pc)
    save_checkpoint(probe.to_checkpoint(run.meta()), run.path("probe.ckpt"))
    out = {"train_accuracy": probe.accuracy(train), "heldout_accuracy": probe.accuracy(held)}
    write_json(out, run.path("accuracy.json"))
    return out


def _finish_optim(run: Run, res, name: str = "image"):
    analysis.save_png(res.image, run.path(f"{name}.png"))
    np.save(run.path(f"{name}.npy"), res.image)
    write_rows(res.trace, run.path(f"{name}_trace.csv"))
    if res.snapshots:
        snap = run.path("snapshots")
        snap.mkdir()
        for step, img in res.snapshots:
            analysis.save_png(img, snap / f"{name}_{step:05d}.png")


def _nets_for(run: Run, loss: str):
    d = load_denoiser(run.args)
    b = load_corrective(run.args, required=loss in ("lmc", "lmc_sds"))
    return d, b


def cmd_synthesize(run: Run):
    oc = C.optim_config(run.cfg)
    d, b = _nets_for(run, oc.loss)
    param = make_param(run.cfg, d.arch.channels, oc)
    res = run_synthesis(run.cfg["optimize"]["target_class"], param, oc, d, b)
    _finish_optim(run, res)
    return {"steps": oc.steps, "loss": oc.loss}


def cmd_edit(run: Run):
    oc = C.optim_config(run.cfg, edit=True)
    d, b = _nets_for(run, oc.loss)
    _, held = load_data(run.args)
    image = pick_image(run.cfg, held)
    o = run.cfg["optimize"]
    res = run_edit(image, o["target_class"], make_param(run.cfg, d.arch.channels, oc), oc, d, b,
                   y_source=o["source_class"])
    analysis.save_png(image, run.path("input.png"))
    _finish_optim(run, res, "edited")
    return {"change_rms": float(np.sqrt(np.mean((res.image - image) ** 2)))}


def cmd_variants(run: Run):
    oc = C.optim_config(run.cfg, edit=True)
    d, b = _nets_for(run, oc.loss)
    _, held = load_data(run.args)
    o = run.cfg["optimize"]
    image = pick_image(run.cfg, held)
    results = run_variants(image, o["target_class"], o["variants"],
                           make_param(run.cfg, d.arch.channels, oc), oc, d, b,
                           policy=o["variant_policy"], y_source=o["source_class"])
    for i, r in enumerate(results):
        analysis.save_png(r.image, run.path(f"variant_{i:02d}.png"))
    np.save(run.path("variants.npy"), np.stack([r.image for r in results]))
    analysis.save_grid_png([image] + [r.image for r in results], run.path("grid.png"))
    out = {"n": len(results)}
    if len(results) > 1:
        out["pairwise_diversity"] = analysis.pairwise_diversity([r.image for r in results])
    write_json(out, run.path("diversity.json"))
    return out


def cmd_train_translator(run: Run):
    train, held = load_data(run.args)
    d = load_denoiser(run.args)
    b = load_corrective(run.args)
    t = run.cfg["translate"]
    dc = C.distill_config(run.cfg)
    source, held_src = train.of_class(t["source_class"]), held.of_class(t["source_class"])
    tnet, trace = train_translator(source, t["target_classes"], d, b, dc, heldout=held_src)
    save_checkpoint(tnet.to_checkpoint(run.meta(steps=dc.steps)), run.path("translator.ckpt"))
    write_rows(trace, run.path("trace.csv"))
    probe = load_probe(run.args, required=False)
    out = {"steps": dc.steps}
    if probe is not None and len(held_src):
        rows = evaluate_translator(tnet, held_src.images, t["target_classes"], probe)
        write_eval_csv(rows, run.path("eval.csv"))
        out["retrieval"] = float(np.mean([r["retrieval"] for r in rows]))
        out["identity_retrieval"] = identity_retrieval(held_src.images, t["target_classes"], probe)
    return out


def cmd_translate(run: Run):
    tnet = TranslatorNet.from_checkpoint(load_checkpoint(resolve(run.args, "translator")))
    _, held = load_data(run.args)
    t = run.cfg["translate"]
    src = held.of_class(t["source_class"]).images[:8]
    rows = [src] + [translate(tnet, src, c) for c in t["target_classes"]]
    np.save(run.path("translations.npy"), np.stack(rows[1:]))
    analysis.save_grid_png([img for row in rows for img in row], run.path("translations.png"),
                           cols=len(src))
    return {"images": len(src), "targets": list(t["target_classes"])}


def _read_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return (arr / 127.5 - 1.0)[None]


def cmd_analyze(run: Run):
    _, held = load_data(run.args)
    groups = {"dataset": held.images.astype(np.float64)}
    for spec in run.args.images or []:
        p = Path(spec)
        files = sorted(p.rglob("*.png")) if p.is_dir() else [p]
        if not files:
            raise ValidationError(f"no PNG files under {spec}")
        groups[p.stem] = np.stack([_read_png(f) for f in files])
    stats = {k: analysis.image_stats(v) for k, v in groups.items()}
    write_json({k: v.to_dict() for k, v in stats.items()}, run.path("stats.json"))
    write_rows([{"group": k, "band_ratio": v.band_ratio} for k, v in stats.items()],
               run.path("stats.csv"))
    analysis.plot_stats(stats, run.path("stats.png"))
    return {k: v.band_ratio for k, v in stats.items()}


def tiny_fixture(seed: int = 0) -> Denoiser:
    """Untrained miniature denoiser (< 10k parameters); the checked identities
    hold for any weights."""
    return Denoiser.create(4, make_cosine_schedule(), DenoiserArch(base=4, levels=2, embed_dim=8),
                           seed=seed)


def cmd_gradcheck(run: Run):
    p = resolve(run.args, "denoiser", required=False)
    tiny = tiny_fixture(run.cfg["seed"])
    d = Denoiser.from_checkpoint(load_checkpoint(p)) if p else tiny
    rep = analysis.gradcheck(d, tiny, seed=run.cfg["seed"])
    run.path("report.json").write_text(rep.to_json() + "\n")
    if not rep.passed:
        raise NumericError(f"gradient identity checks failed; see {run.path('report.json')}")
    return {"passed": True, "denoiser": str(p) if p else "tiny-fixture"}


def cmd_eval_table(run: Run):
    d = load_denoiser(run.args)
    b = load_corrective(run.args, required=False)
    probe = load_probe(run.args)
    _, held = load_data(run.args)
    a, o = run.cfg["analysis"], run.cfg["optimize"]
    pool = held.of_class(o["source_class"]).images[: a["sweep_images"]].astype(np.float64)
    if len(pool) == 0:
        raise ValidationError(f"no held-out images of class {o['source_class']}")
    rows = []
    for loss in a["sweep_losses"]:
        if loss in ("lmc", "lmc_sds") and b is None:
            raise DependencyError("the sweep includes LMC losses; run `lmcsds train-corrective` first")
        for omega in a["sweep_omegas"]:
            oc = replace(C.optim_config(run.cfg, loss=loss, edit=True), omega=float(omega),
                         steps=a["sweep_steps"])
            param = make_param(run.cfg, d.arch.channels, oc)
            outs = np.stack([run_edit(img, o["target_class"], param, oc, d, b,
                                      y_source=o["source_class"]).image for img in pool])
            rows.append({
                "loss": loss, "omega": omega,
                "feature_distance": float(np.mean(analysis.feature_distance(probe, pool, outs))),
                "target_score": float(np.mean(probe.scores(outs, o["target_class"]))),
                "retrieval": analysis.retrieval_accuracy(probe, outs, o["target_class"]),
            })
            log.info("eval-table %s", rows[-1])
    write_rows(rows, run.path("table.csv"))
    _plot_table(rows, run.path("table.png"))
    return {"rows": len(rows)}


def _plot_table(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for loss in dict.fromkeys(r["loss"] for r in rows):
        sel = [r for r in rows if r["loss"] == loss]
        ax.plot([r["feature_distance"] for r in sel], [r["target_score"] for r in sel], "o-",
                label=loss)
    ax.set_xlabel("probe feature distance to input")
    ax.set_ylabel("probe target-class score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


COMMANDS = {
    "gen-data": (cmd_gen_data, ()),
    "train-diffusion": (cmd_train_diffusion, ("data",)),
    "train-corrective": (cmd_train_corrective, ("data", "denoiser")),
    "train-probe": (cmd_train_probe, ("data",)),
    "synthesize": (cmd_synthesize, ("denoiser", "corrective")),
    "edit": (cmd_edit, ("data", "denoiser", "corrective")),
    "variants": (cmd_variants, ("data", "denoiser", "corrective")),
    "train-translator": (cmd_train_translator, ("data", "denoiser", "corrective", "probe")),
    "translate": (cmd_translate, ("data", "translator")),
    "analyze": (cmd_analyze, ("data",)),
    "gradcheck": (cmd_gradcheck, ("denoiser",)),
    "eval-table": (cmd_eval_table, ("data", "denoiser", "corrective", "probe")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lmcsds", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, deps) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--workdir", default="runs")
        p.add_argument("-v", "--verbose", action="store_true")
        for dep in deps:
            p.add_argument(f"--{dep}", metavar="PATH",
                           help=f"{dep} artifact (default: latest `{PRODUCERS[dep][0]}` run)")
        if name == "train-corrective":
            p.add_argument("--triplet-cache", metavar="PATH",
                           help="reuse (or create) a pre-generated triplet file")
        if name == "analyze":
            p.add_argument("--images", nargs="*", metavar="PNG_OR_DIR")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.set, args.seed)
        run = Run(args, cfg)
        summary = COMMANDS[args.command][0](run)
        write_json({"command": args.command, "config_digest": run.digest,
                    "summary": summary}, run.path("summary.json"))
        print(run.dir)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except LMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
