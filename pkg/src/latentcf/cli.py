"""Command-line entrypoint.

Every command resolves its configuration, writes ``config.resolved`` and a
version stamp into the run directory, then does its work there::

    runs/<name>/
        config.resolved   version.json   records.jsonl
        tables/*.csv      images/*.png   figures/*.png   report.txt

Exit codes: 0 success, 2 bad arguments or config, 3 backend failure,
4 empty corpus. Failures print one JSON line ``{"error": ..., "kind": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, RunConfig, resolve_config, set_dotted
from .core import LEVELS, derive_seed, load_png, save_png
from .harness import (
    QUALITY_COLUMNS,
    STRENGTH_COLUMNS,
    AttackSettings,
    EmptyCorpusError,
    RecordWriter,
    aggregate_transfer,
    format_table,
    latent_delta_profile,
    matrix_report,
    quality_table,
    read_records,
    run_jobs,
    run_level_ablation,
    run_strength_ablation,
    run_transfer_experiment,
    video_asr,
    write_csv,
)
from .models import BackendError

log = logging.getLogger("latentcf")

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_EMPTY = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error(message, "usage")
        sys.exit(EXIT_USAGE)


def _emit_error(message: str, kind: str) -> None:
    print(json.dumps({"error": str(message), "kind": kind}), file=sys.stderr)


# -- argument parsing ---------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=["toy", "celebdf", "dfdc", "ffpp"])
    p.add_argument("--backend", help="'toy' or 'module:factory'")
    p.add_argument("--manifest", help="CSV with image_id,path[,label,video_id]")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", dest="output_dir", help="run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. attack.queries=50")
    p.add_argument("--encoder", help="encoder checkpoint (defaults to <run>/encoder.npz if present)")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p):
    p.add_argument("--epsilon", type=float, help="step size for the chosen method")
    p.add_argument("--queries", type=int)
    p.add_argument("--target", choices=["real", "fake"])
    p.add_argument("--mask", choices=list(LEVELS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latentcf", description="Latent-space counterfactuals against forgery detectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("finetune", help="fine-tune the encoder on the corpus")
    _common(p)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("invert", help="encode the corpus into a latent store")
    _common(p)

    p = sub.add_parser("attack", help="attack every fake image with one method")
    _common(p)
    _attack_flags(p)
    p.add_argument("--method", choices=["latent", "fgsm", "pgd", "mifgsm"], default="latent")
    p.add_argument("--detector", help="source detector (default: first)")

    p = sub.add_parser("evaluate", help="ASR and quality tables from records.jsonl")
    _common(p)
    p.add_argument("--records", help="records file (default: <run>/records.jsonl)")

    p = sub.add_parser("matrix", help="transferability matrices for every configured method")
    _common(p)
    _attack_flags(p)

    p = sub.add_parser("ablate-levels", help="white-box ASR under S/M/D/Full masks")
    _common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--queries", type=int)
    p.add_argument("--detector")

    p = sub.add_parser("ablate-epsilon", help="quality/ASR trade-off over latent step sizes")
    _common(p)
    p.add_argument("--epsilons", help="comma-separated step sizes")
    p.add_argument("--queries", type=int)
    p.add_argument("--detector")

    p = sub.add_parser("visualize", help="comparison grids, residual maps and Grad-CAM")
    _common(p)
    p.add_argument("--records")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("models-verify", help="run the backend conformance suite")
    _common(p)

    p = sub.add_parser("models", help="backend utilities")
    msub = p.add_subparsers(dest="models_command", required=True, parser_class=_Parser)
    v = msub.add_parser("verify", help="run the backend conformance suite")
    v.add_argument("name", nargs="?", help="backend name (overrides --backend)")
    _common(v)

    p = sub.add_parser("report", help="render text tables and figures from a run directory")
    _common(p)

    p = sub.add_parser("demo", help="full toy pipeline end to end")
    _common(p)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    for key in ("backend", "manifest", "seed", "workers", "output_dir", "preset"):
        v = getattr(args, key, None)
        if v is not None:
            o[key] = v
    if getattr(args, "name", None):
        o["backend"] = args.name
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(o, k.strip(), yaml.safe_load(v))
    cmd = args.command
    eps = getattr(args, "epsilon", None)
    if cmd == "attack" and eps is not None:
        set_dotted(o, "attack.latent_epsilon" if args.method == "latent" else "attack.pixel_epsilon", eps)
    if cmd == "matrix" and eps is not None:
        set_dotted(o, "attack.latent_epsilon", eps)
    if cmd == "ablate-levels" and eps is not None:
        set_dotted(o, "ablation.level_epsilon", eps)
    if getattr(args, "epsilons", None):
        set_dotted(o, "ablation.epsilons", [float(e) for e in args.epsilons.split(",")])
    for flag, key in (("queries", "attack.queries"), ("target", "attack.target"), ("mask", "attack.mask"),
                      ("steps", "finetune.steps"), ("detector", "ablation.detector")):
        v = getattr(args, flag, None)
        if v is not None:
            set_dotted(o, key, v)
    return o


# -- run directory helpers ---------------------------------------------------------------


def _prepare_run(cfg: RunConfig, command: str) -> Path:
    run = Path(cfg.output_dir)
    for sub in ("tables", "images", "figures"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.resolved").write_text(cfg.to_yaml())
    stamp = {
        "tool": "latentcf",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": command,
    }
    (run / "version.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")
    return run


def _settings(cfg: RunConfig) -> AttackSettings:
    a = cfg.attack
    return AttackSettings(a.latent_epsilon, a.pixel_epsilon, a.bound_beta, a.queries, a.momentum, a.target,
                          a.early_stop, a.ascent, a.mask)


def _backend(cfg: RunConfig):
    from .models.registry import load_backend

    opts = dict(cfg.backend_options)
    if cfg.backend == "toy":
        opts.setdefault("seed", cfg.seed)
        opts.setdefault("n_detectors", cfg.toy.n_detectors)
        opts.setdefault("detector_train", cfg.toy.detector_train)
    try:
        return load_backend(cfg.backend, **opts)
    except TypeError as exc:
        raise ConfigError(f"bad backend_options for {cfg.backend}: {exc}") from exc


def _with_encoder(pipe, run: Path, explicit: str | None):
    path = Path(explicit) if explicit else run / "encoder.npz"
    if not path.exists():
        if explicit:
            raise ConfigError(f"encoder checkpoint {path} not found")
        if pipe.world is not None:
            log.warning("toy encoder is not fine-tuned and cannot see artifacts; run `finetune` into %s first", run)
        return pipe
    enc = pipe.encoder
    if not hasattr(type(enc), "load"):
        raise BackendError(f"encoder {type(enc).__name__} cannot load checkpoints")
    pipe.encoder = type(enc).load(path)
    return pipe


def _read_manifest(path: str) -> list[dict]:
    root = Path(path).parent
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    for r in rows:
        if "image_id" not in r or "path" not in r:
            raise ConfigError("manifest needs image_id and path columns")
        r["path"] = str((root / r["path"]).resolve()) if not Path(r["path"]).is_absolute() else r["path"]
    return rows


def _load_images(rows) -> dict[str, np.ndarray]:
    out = {}
    for r in rows:
        try:
            out[r["image_id"]] = load_png(r["path"])
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", r["path"], exc)
    return out


def attack_corpus(cfg: RunConfig, pipe) -> dict[str, np.ndarray]:
    """Fake images to attack, keyed by image_id."""
    if cfg.manifest:
        rows = [r for r in _read_manifest(cfg.manifest) if r.get("label", "fake") == "fake"]
        corpus = _load_images(rows)
    elif pipe.world is not None:
        items = pipe.world.sample(0, cfg.toy.n_attack, seed=derive_seed(cfg.seed, "attack"), prefix="atk-")
        corpus = {it.image_id: it.image for it in items}
    else:
        raise ConfigError("non-toy backends need --manifest")
    if not corpus:
        raise EmptyCorpusError("attack corpus is empty")
    return corpus


def finetune_corpus(cfg: RunConfig, pipe) -> dict[str, np.ndarray]:
    if cfg.manifest:
        corpus = _load_images(_read_manifest(cfg.manifest))
    elif pipe.world is not None:
        half = cfg.toy.n_finetune // 2
        items = pipe.world.sample(half, cfg.toy.n_finetune - half, seed=derive_seed(cfg.seed, "finetune"),
                                  prefix="ft-")
        corpus = {it.image_id: it.image for it in items}
    else:
        raise ConfigError("non-toy backends need --manifest")
    if not corpus:
        raise EmptyCorpusError("fine-tuning corpus is empty")
    return corpus


def _save_originals(run: Path, corpus: dict) -> None:
    for image_id, x in corpus.items():
        p = run / "images" / f"original_{image_id}.png"
        if not p.exists():
            save_png(p, x, {"image_id": image_id})


def _source(cfg: RunConfig, pipe) -> str:
    name = cfg.ablation.detector or next(iter(pipe.detectors))
    if name not in pipe.detectors:
        raise ConfigError(f"unknown detector {name!r}; have {list(pipe.detectors)}")
    return name


# -- commands ----------------------------------------------------------------------------


def cmd_finetune(cfg, run, pipe, args):
    from .inversion import PERCEPTUAL_PLUGINS, FinetuneConfig, finetune_encoder
    from .plotting import plot_loss_curve

    f = cfg.finetune
    fcfg = FinetuneConfig(f.lambda_mse, f.lambda_lpips, f.lambda_id, f.steps, f.batch_size, f.learning_rate,
                          f.holdout_fraction, seed=cfg.seed)
    corpus = finetune_corpus(cfg, pipe)
    perceptual = PERCEPTUAL_PLUGINS[f.perceptual]()
    res = finetune_encoder(pipe.encoder, pipe.generator, list(corpus.values()), fcfg, perceptual, pipe.embedder)
    res.write(run)
    if res.curve:
        plot_loss_curve(res.curve, run / "figures" / "loss_curve.png")
    pipe.encoder = res.encoder
    return {"holdout_before": res.holdout_before, "holdout_after": res.holdout_after, "steps": f.steps,
            "reverted": res.reverted}


def cmd_invert(cfg, run, pipe, args):
    from .inversion import invert_corpus

    if cfg.manifest:
        images = [(r["image_id"], r["path"]) for r in _read_manifest(cfg.manifest)]
    else:
        images = list(finetune_corpus(cfg, pipe).items())
    store = invert_corpus(pipe.encoder, pipe.generator, images, run / "latents")
    return {"inverted": len(store), "skipped": len(store.skipped),
            "mean_mse": float(np.mean(list(store.mse.values()))) if store.mse else None}


def cmd_attack(cfg, run, pipe, args):
    corpus = attack_corpus(cfg, pipe)
    _save_originals(run, corpus)
    source = args.detector or next(iter(pipe.detectors))
    if source not in pipe.detectors:
        raise ConfigError(f"unknown detector {source!r}")
    writer = RecordWriter(run / "records.jsonl")
    jobs = [(i, source, args.method, _settings(cfg)) for i in corpus]
    records = run_jobs(pipe, jobs, corpus, writer, cfg.workers, run / "images")
    n_ok = sum(r.status == "success" for r in records)
    return {"attacked": len(records), "success": n_ok, "asr": n_ok / len(records)}


def cmd_matrix(cfg, run, pipe, args):
    corpus = attack_corpus(cfg, pipe)
    _save_originals(run, corpus)
    writer = RecordWriter(run / "records.jsonl")
    dets = list(pipe.detectors)
    mats = run_transfer_experiment(pipe, dets, cfg.attack.methods, corpus, _settings(cfg), writer, cfg.workers,
                                   run / "images")
    for m, mat in mats.items():
        (run / "tables" / f"transfer_{m}.csv").write_text(mat.to_csv("all"))
        (run / "tables" / f"transfer_{m}_source_successful.csv").write_text(mat.to_csv("source_successful"))
    return {m: {"diag_mean": mat.diagonal_mean(), "offdiag_mean": mat.off_diagonal_mean()} for m, mat in mats.items()}


def cmd_ablate_levels(cfg, run, pipe, args):
    corpus = attack_corpus(cfg, pipe)
    source = _source(cfg, pipe)
    writer = RecordWriter(run / "ablation_levels.jsonl")
    asr = run_level_ablation(pipe, source, corpus, cfg.ablation.level_epsilon, cfg.attack.queries,
                             _settings(cfg), writer, cfg.workers)
    write_csv(run / "tables" / "level_ablation.csv", ["level", "asr", "epsilon", "queries", "detector"],
              [[k, v, cfg.ablation.level_epsilon, cfg.attack.queries, source] for k, v in asr.items()])
    return asr


def cmd_ablate_epsilon(cfg, run, pipe, args):
    corpus = attack_corpus(cfg, pipe)
    source = _source(cfg, pipe)
    writer = RecordWriter(run / "ablation_epsilon.jsonl")
    rows = run_strength_ablation(pipe, source, corpus, cfg.ablation.epsilons, cfg.attack.queries,
                                 _settings(cfg), writer, cfg.workers)
    write_csv(run / "tables" / "strength_ablation.csv", STRENGTH_COLUMNS, [[r[c] for c in STRENGTH_COLUMNS] for r in rows])
    return rows


def cmd_evaluate(cfg, run, pipe, args):
    path = Path(args.records) if getattr(args, "records", None) else run / "records.jsonl"
    records = _records_or_fail(path)
    rows = []
    for (m, s) in sorted({(r.attack_method, r.source_detector) for r in records}):
        sel = [r for r in records if r.attack_method == m and r.source_detector == s]
        ok = [r for r in sel if r.status == "success"]
        rows.append([m, s, len(sel), len(ok), len(ok) / len(sel)])
    write_csv(run / "tables" / "asr.csv", ["method", "source", "n", "n_success", "white_box_asr"], rows)
    q = quality_table(records)
    write_csv(run / "tables" / "quality.csv", QUALITY_COLUMNS, [[r[c] for c in QUALITY_COLUMNS] for r in q])
    if cfg.manifest:
        video_of = {r["image_id"]: r.get("video_id") for r in _read_manifest(cfg.manifest) if r.get("video_id")}
        if video_of:
            v = video_asr(records, video_of)
            write_csv(run / "tables" / "video_asr.csv", ["method", "source", "evaluator", "n_videos", "asr"], v)
    return {"records": len(records), "methods": sorted({r.attack_method for r in records})}


def _records_or_fail(path: Path):
    if not path.exists():
        raise EmptyCorpusError(f"no records at {path}")
    records = read_records(path)
    if not records:
        raise EmptyCorpusError(f"{path} holds no records")
    return records


def cmd_visualize(cfg, run, pipe, args):
    from .viz import comparison_grid, gradcam_map, residual_map, save_grid

    path = Path(args.records) if getattr(args, "records", None) else run / "records.jsonl"
    records = [r for r in _records_or_fail(path) if r.image_path and r.status != "error"]
    source = _source(cfg, pipe)
    limit = getattr(args, "limit", None) or cfg.toy.n_visualize
    methods = sorted({r.attack_method for r in records if r.source_detector == source})
    by_image: dict[str, dict] = {}
    for r in records:
        if r.source_detector == source:
            by_image.setdefault(r.image_id, {})[r.attack_method] = r
    ids = [i for i in sorted(by_image) if set(by_image[i]) == set(methods)][:limit]
    vdir = run / "images" / "viz"
    vdir.mkdir(parents=True, exist_ok=True)
    rows = []
    d = pipe.detectors[source]
    for image_id in ids:
        orig = load_png(run / "images" / f"original_{image_id}.png")
        advs = [load_png(run / by_image[image_id][m].image_path) for m in methods]
        rows.append((orig, advs))
        if getattr(d, "gradcam", False):
            gradcam_map(d, orig).save(vdir / f"gradcam_{source}_{image_id}_original.png", overlay=orig)
        for m, adv in zip(methods, advs):
            residual_map(orig, adv).save(vdir / f"residual_{m}_{source}_{image_id}.png")
            if getattr(d, "gradcam", False):
                gradcam_map(d, adv).save(vdir / f"gradcam_{source}_{image_id}_{m}.png", overlay=adv)
    if not rows:
        raise EmptyCorpusError("no complete records to visualise")
    # nearest-neighbour upscaling keeps toy-sized tiles legible under their labels
    f = max(1, 96 // rows[0][0].shape[0])
    up = lambda im: np.repeat(np.repeat(im, f, axis=0), f, axis=1)  # noqa: E731
    grid = comparison_grid([(up(o), [up(a) for a in advs]) for o, advs in rows], methods, pad=14)
    save_grid(run / "images" / f"grid_{source}.png", grid, methods)
    return {"images": len(ids), "methods": methods}


def cmd_models_verify(cfg, run, pipe, args):
    from .models.registry import verify_pipeline

    checks = verify_pipeline(pipe, seed=cfg.seed)
    out = [c.to_dict() for c in checks]
    (run / "conformance.json").write_text(json.dumps(out, indent=2) + "\n")
    failed = [c.name for c in checks if not c.passed]
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.detail}".rstrip())
    if failed:
        raise BackendError(f"conformance failed: {', '.join(failed)}")
    return {"checks": len(checks), "failed": 0}


def cmd_report(cfg, run, pipe, args):
    """Aligned text tables plus figures, derived only from files in ``run``."""
    from . import plotting

    parts = []
    rec_path = run / "records.jsonl"
    if rec_path.exists():
        records = read_records(rec_path)
        dets = sorted({r.source_detector for r in records} | {k for r in records for k in r.verdicts})
        methods = sorted({r.attack_method for r in records})
        q = quality_table(records)
        parts.append(format_table(QUALITY_COLUMNS, [[r[c] for c in QUALITY_COLUMNS] for r in q],
                                  title="Quality of successful adversarial examples"))
        if len(dets) >= 2:
            mats = {m: aggregate_transfer(records, dets, m) for m in methods}
            for m in mats.values():
                parts.append(matrix_report(m, "all"))
                parts.append(matrix_report(m, "source_successful"))
            plotting.plot_transfer_matrices(mats, run / "figures" / "transfer.png")
        try:
            prof = latent_delta_profile(records)
            parts.append(format_table(["dataset", "S", "M", "D"], [[k, *v] for k, v in prof.items()],
                                      title="Mean |delta W| per level (successful latent attacks)"))
            plotting.plot_latent_delta(prof, run / "figures" / "latent_delta.png")
        except ValueError:
            pass
    lvl = run / "tables" / "level_ablation.csv"
    if lvl.exists():
        rows = list(csv.DictReader(open(lvl)))
        parts.append(format_table(["level", "asr %"], [[r["level"], _pct_str(r["asr"])] for r in rows],
                                  title="Level-wise ablation"))
        plotting.plot_level_ablation({r["level"]: float(r["asr"]) if r["asr"] else None for r in rows},
                                     run / "figures" / "level_ablation.png")
    st = run / "tables" / "strength_ablation.csv"
    if st.exists():
        rows = list(csv.DictReader(open(st)))
        parts.append(format_table(list(STRENGTH_COLUMNS), [[r[c] for c in STRENGTH_COLUMNS] for r in rows],
                                  title="Strength vs. quality"))
        plotting.plot_strength_ablation(
            [{"epsilon": float(r["epsilon"]), "asr": float(r["asr"]) if r["asr"] else None,
              "id_similarity": float(r["id_similarity"]) if r["id_similarity"] else float("nan")} for r in rows],
            run / "figures" / "strength_ablation.png")
    curve = run / "loss_curve.csv"
    if curve.exists() and not (run / "figures" / "loss_curve.png").exists():
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(open(curve))]
        if rows:
            plotting.plot_loss_curve(rows, run / "figures" / "loss_curve.png")
    if not parts:
        raise EmptyCorpusError(f"nothing to report in {run}")
    text = "\n\n".join(parts) + "\n"
    (run / "report.txt").write_text(text)
    print(text)
    return {"sections": len(parts)}


def _pct_str(v):
    return "" if v in ("", None) else f"{100 * float(v):.2f}"


def cmd_demo(cfg, run, pipe, args):
    if pipe.world is None:
        raise ConfigError("demo needs the toy backend")
    out = {"finetune": cmd_finetune(cfg, run, pipe, args)}
    out["invert"] = cmd_invert(cfg, run, pipe, args)
    out["matrix"] = cmd_matrix(cfg, run, pipe, args)
    out["ablate_levels"] = cmd_ablate_levels(cfg, run, pipe, args)
    out["ablate_epsilon"] = cmd_ablate_epsilon(cfg, run, pipe, args)
    out["evaluate"] = cmd_evaluate(cfg, run, pipe, args)
    out["visualize"] = cmd_visualize(cfg, run, pipe, args)
    cmd_report(cfg, run, pipe, args)
    digests = run_digests(run)
    (run / "digests.json").write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n")
    out["files"] = len(digests)
    out["run_digest"] = hashlib.sha256(json.dumps(digests, sort_keys=True).encode()).hexdigest()
    return out


def run_digests(run: Path) -> dict[str, str]:
    """sha256 of every artifact except the stamp files and the digest list itself."""
    skip = {"version.json", "digests.json", "config.resolved"}
    out = {}
    for p in sorted(run.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(run))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


COMMANDS = {
    "finetune": cmd_finetune,
    "invert": cmd_invert,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "ablate-levels": cmd_ablate_levels,
    "ablate-epsilon": cmd_ablate_epsilon,
    "visualize": cmd_visualize,
    "models-verify": cmd_models_verify,
    "report": cmd_report,
    "demo": cmd_demo,
}

# commands that only read files from the run directory
_NO_BACKEND = {"report"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = "models-verify" if args.command == "models" else args.command
    args.command = command
    try:
        cfg = resolve_config(args.config, _overrides(args))
        run = _prepare_run(cfg, command)
        pipe = None
        if command not in _NO_BACKEND:
            pipe = _backend(cfg)
            if command not in ("finetune", "demo"):
                pipe = _with_encoder(pipe, run, args.encoder)
        result = COMMANDS[command](cfg, run, pipe, args)
    except ConfigError as exc:
        _emit_error(exc, "config")
        return EXIT_USAGE
    except EmptyCorpusError as exc:
        _emit_error(exc, "empty_corpus")
        return EXIT_EMPTY
    except BackendError as exc:
        _emit_error(exc, "backend")
        return EXIT_BACKEND
    if command not in ("report", "models-verify"):
        print(json.dumps({"command": command, "result": _jsonable(result)}, sort_keys=True))
    return EXIT_OK


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


if __name__ == "__main__":
    sys.exit(main())
