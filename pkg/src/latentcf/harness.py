"""Experiment orchestration: transfer matrices, ablations, record streams, reports.

Every per-image outcome is appended to a JSON-lines stream before any
aggregation, so each table here is a pure fold over persisted records.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attack import PIXEL_ATTACKS, PixelAttackConfig, latent_attack
from .core import AttackConfig, Label, LatentCode, LEVELS, level_slices, predefined_mask, save_png, scalar_to_label
from .models import BackendError, Detector, Generator, IdentityEmbedder, detector_score, encode
from .metrics import ID_THRESHOLD, quality_report

log = logging.getLogger(__name__)


class EmptyCorpusError(ValueError):
    pass


@dataclass
class Pipeline:
    """The backends an experiment runs against."""

    generator: Generator
    encoder: object
    detectors: dict[str, Detector]
    embedder: IdentityEmbedder
    perceptual: object
    dataset: str = "toy"
    world: object = None  # toy backends keep their sampler here

    @property
    def reentrant(self) -> bool:
        handles = [self.generator, *self.detectors.values()]
        return all(getattr(h, "reentrant", False) for h in handles)


@dataclass(frozen=True)
class AttackSettings:
    latent_epsilon: float = 0.01
    pixel_epsilon: float = 0.02
    bound_beta: float = 0.1
    queries: int = 100
    momentum: float = 1.0
    target: str = "real"
    early_stop: bool = True
    ascent: bool = False
    mask: str = "Full"

    def with_(self, **kw) -> "AttackSettings":
        d = asdict(self)
        d.update(kw)
        return AttackSettings(**d)


@dataclass
class RunRecord:
    image_id: str
    source_detector: str
    attack_method: str
    mask_level: str | None
    epsilon: float
    queries_used: int
    status: str
    final_score: float
    target: str = "real"
    dataset: str = "toy"
    verdicts: dict[str, str] = field(default_factory=dict)
    scores: dict[str, float] = field(default_factory=dict)
    quality: dict | None = None
    latent_delta_per_level: list[float] | None = None
    image_path: str | None = None
    error: str | None = None

    @property
    def key(self) -> tuple:
        return record_key(self.image_id, self.source_detector, self.attack_method, self.mask_level, self.epsilon)

    def to_json(self) -> str:
        return json.dumps(_plain(asdict(self)), sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def record_key(image_id, source, method, mask_level, epsilon) -> tuple:
    return (image_id, source, method, mask_level, float(epsilon))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class RecordWriter:
    """Serialised JSON-lines appender; knows which jobs are already on disk.

    A torn final line (from an interrupted run) is dropped on open so that a
    resumed run rewrites it.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.records: list[RunRecord] = []
        if self.path.exists():
            raw = self.path.read_bytes()
            keep = raw[: raw.rfind(b"\n") + 1] if not raw.endswith(b"\n") else raw
            if keep != raw:
                self.path.write_bytes(keep)
            for line in keep.decode().splitlines():
                if line.strip():
                    self.records.append(RunRecord.from_json(line))
        self._done = {r.key: r for r in self.records}

    def has(self, key) -> bool:
        return key in self._done

    def get(self, key) -> RunRecord:
        return self._done[key]

    def append(self, rec: RunRecord) -> None:
        with open(self.path, "a") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
        self.records.append(rec)
        self._done[rec.key] = rec


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


# -- single job ---------------------------------------------------------------------


def latent_delta_per_level(w0: LatentCode, w: LatentCode) -> list[float] | None:
    try:
        slices = level_slices(w0.num_styles)
    except ValueError:
        return None
    delta = np.abs(w.codes - w0.codes)
    return [float(delta[slices[level]].mean()) for level in "SMD"]


def run_attack_job(pipe: Pipeline, image_id: str, x: np.ndarray, source: str, method: str,
                   settings: AttackSettings, image_dir: Path | None = None) -> tuple[RunRecord, np.ndarray | None]:
    d = pipe.detectors[source]
    target = Label.parse(settings.target)
    base = dict(image_id=image_id, source_detector=source, attack_method=method, target=target.value,
                dataset=pipe.dataset)
    try:
        if method == "latent":
            w0 = encode(pipe.encoder, x)
            mask = predefined_mask(settings.mask, w0.num_styles) if settings.mask != "Full" else None
            cfg = AttackConfig(settings.latent_epsilon, settings.queries, target, mask, settings.early_stop,
                               settings.ascent)
            res = latent_attack(w0, pipe.generator, d, cfg)
            eps, mask_level = settings.latent_epsilon, settings.mask
            deltas = latent_delta_per_level(w0, res.adversarial_latent)
        else:
            cfg = PixelAttackConfig(settings.pixel_epsilon, settings.bound_beta, settings.queries,
                                    settings.momentum, target, settings.early_stop)
            res = PIXEL_ATTACKS[method](x, d, cfg)
            eps, mask_level, deltas = settings.pixel_epsilon, None, None
        adv = res.adversarial_image
        scores = {name: detector_score(det, adv) for name, det in pipe.detectors.items()}
    except (BackendError, FloatingPointError) as exc:
        log.warning("job %s/%s/%s failed: %s", image_id, source, method, exc)
        eps = settings.latent_epsilon if method == "latent" else settings.pixel_epsilon
        rec = RunRecord(**base, mask_level=settings.mask if method == "latent" else None, epsilon=eps,
                        queries_used=0, status="error", final_score=float("nan"), error=str(exc))
        return rec, None
    q = quality_report(x, adv, pipe.embedder, pipe.perceptual)
    rec = RunRecord(
        **base,
        mask_level=mask_level,
        epsilon=float(eps),
        queries_used=res.queries_used,
        status=res.status.value,
        final_score=res.final_score,
        verdicts={k: scalar_to_label(v).value for k, v in scores.items()},
        scores=scores,
        quality=q.to_dict(),
        latent_delta_per_level=deltas,
    )
    if image_dir is not None:
        name = f"{method}_{mask_level or 'px'}_{eps:g}_{source}_{image_id}.png"
        image_dir.mkdir(parents=True, exist_ok=True)
        save_png(image_dir / name, adv, {"image_id": image_id, "method": method, "source": source})
        rec.image_path = f"images/{name}"
    return rec, adv


def run_jobs(pipe: Pipeline, jobs: Sequence[tuple], corpus: dict[str, np.ndarray],
             writer: RecordWriter | None = None, workers: int = 1,
             image_dir: Path | None = None) -> list[RunRecord]:
    """Runs ``(image_id, source, method, settings)`` jobs in order.

    Finished jobs found in ``writer`` are reused, which makes runs resumable.
    Records are appended in job order regardless of the worker count.
    """

    def key_of(job):
        image_id, source, method, s = job
        eps = s.latent_epsilon if method == "latent" else s.pixel_epsilon
        return record_key(image_id, source, method, s.mask if method == "latent" else None, eps)

    todo = [j for j in jobs if writer is None or not writer.has(key_of(j))]

    def run(job):
        image_id, source, method, s = job
        return run_attack_job(pipe, image_id, corpus[image_id], source, method, s, image_dir)[0]

    if workers > 1 and not pipe.reentrant:
        log.warning("backends are not reentrant; running sequentially")
        workers = 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            new = list(pool.map(run, todo))  # map preserves order
    else:
        new = [run(j) for j in todo]
    fresh = {}
    for rec in new:
        if writer is not None:
            writer.append(rec)
        fresh[rec.key] = rec
    out = []
    for j in jobs:
        k = key_of(j)
        out.append(fresh[k] if k in fresh else writer.get(k))
    return out


def _corpus_dict(corpus) -> dict[str, np.ndarray]:
    items = dict(corpus.items()) if isinstance(corpus, dict) else dict(corpus)
    if not items:
        raise EmptyCorpusError("corpus is empty")
    return items


# -- transfer matrix ---------------------------------------------------------------------


@dataclass
class TransferMatrix:
    method: str
    detectors: list[str]
    cells: dict[tuple[str, str], float | None]
    cells_source_successful: dict[tuple[str, str], float | None]
    counts: dict[str, int]
    counts_source_successful: dict[str, int]

    def asr(self, source: str, evaluator: str, subset: str = "all") -> float | None:
        table = self.cells if subset == "all" else self.cells_source_successful
        return table[(source, evaluator)]

    def diagonal(self) -> list[float | None]:
        return [self.cells[(d, d)] for d in self.detectors]

    def off_diagonal(self) -> list[float | None]:
        return [self.cells[(s, e)] for s in self.detectors for e in self.detectors if s != e]

    def off_diagonal_mean(self) -> float:
        vals = [v for v in self.off_diagonal() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def diagonal_mean(self) -> float:
        vals = [v for v in self.diagonal() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self, subset: str = "all") -> list[list]:
        table = self.cells if subset == "all" else self.cells_source_successful
        return [[s, *[_pct(table[(s, e)]) for e in self.detectors]] for s in self.detectors]

    def to_csv(self, subset: str = "all") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"{self.method}:source\\eval", *self.detectors, "n"])
        counts = self.counts if subset == "all" else self.counts_source_successful
        for row in self.rows(subset):
            w.writerow([*row, counts[row[0]]])
        return buf.getvalue()


def _pct(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else round(100.0 * v, 2)


def aggregate_transfer(records: Iterable[RunRecord], detectors: Sequence[str], method: str) -> TransferMatrix:
    """Folds records into a matrix of ASR fractions (both denominators)."""
    detectors = list(detectors)
    by_source: dict[str, list[RunRecord]] = {s: [] for s in detectors}
    for r in records:
        if r.attack_method == method and r.source_detector in by_source:
            by_source[r.source_detector].append(r)
    cells, cells_ok, counts, counts_ok = {}, {}, {}, {}
    for s in detectors:
        recs = by_source[s]
        failed = not recs or any(r.status == "error" for r in recs)
        ok = [r for r in recs if r.status == "success"]
        counts[s], counts_ok[s] = len(recs), len(ok)
        for e in detectors:
            if failed:
                cells[(s, e)] = cells_ok[(s, e)] = None
                continue
            cells[(s, e)] = float(np.mean([r.verdicts[e] == r.target for r in recs]))
            cells_ok[(s, e)] = float(np.mean([r.verdicts[e] == r.target for r in ok])) if ok else None
    return TransferMatrix(method, detectors, cells, cells_ok, counts, counts_ok)


def run_transfer_experiment(pipe: Pipeline, detectors: Sequence[str], methods: Sequence[str], corpus,
                            settings: AttackSettings, writer: RecordWriter | None = None, workers: int = 1,
                            image_dir: Path | None = None) -> dict[str, TransferMatrix]:
    """One transfer matrix per attack method over the named detectors."""
    if len(detectors) < 2:
        raise ValueError("a transfer experiment needs at least two detectors")
    corpus = _corpus_dict(corpus)
    jobs = [(image_id, s, m, settings) for m in methods for s in detectors for image_id in corpus]
    records = run_jobs(pipe, jobs, corpus, writer, workers, image_dir)
    return {m: aggregate_transfer(records, detectors, m) for m in methods}


# -- ablations ---------------------------------------------------------------------------


def white_box_asr(records: Sequence[RunRecord]) -> float | None:
    if not records or any(r.status == "error" for r in records):
        return None
    return float(np.mean([r.verdicts[r.source_detector] == r.target for r in records]))


def run_level_ablation(pipe: Pipeline, detector: str, corpus, epsilon: float, queries: int = 100,
                       settings: AttackSettings | None = None, writer: RecordWriter | None = None,
                       workers: int = 1) -> dict[str, float | None]:
    """White-box ASR for the S, M, D and Full masks under otherwise identical configs."""
    corpus = _corpus_dict(corpus)
    base = (settings or AttackSettings()).with_(latent_epsilon=epsilon, queries=queries)
    jobs = [(image_id, detector, "latent", base.with_(mask=level)) for level in LEVELS for image_id in corpus]
    records = run_jobs(pipe, jobs, corpus, writer, workers)
    return {level: white_box_asr([r for r in records if r.mask_level == level]) for level in LEVELS}


STRENGTH_COLUMNS = ("epsilon", "id_similarity", "id_retention", "perceptual", "esnle", "tv", "asr", "n_success")


def run_strength_ablation(pipe: Pipeline, detector: str, corpus, epsilons: Sequence[float], queries: int = 100,
                          settings: AttackSettings | None = None, writer: RecordWriter | None = None,
                          workers: int = 1) -> list[dict]:
    """One row per latent step size; quality columns average successful examples only."""
    if len(epsilons) == 0:
        raise ValueError("epsilons must be non-empty")
    corpus = _corpus_dict(corpus)
    base = (settings or AttackSettings()).with_(queries=queries)
    rows = []
    for eps in epsilons:
        jobs = [(image_id, detector, "latent", base.with_(latent_epsilon=float(eps))) for image_id in corpus]
        records = run_jobs(pipe, jobs, corpus, writer, workers)
        rows.append(strength_row(float(eps), records))
    return rows


def strength_row(eps: float, records: Sequence[RunRecord]) -> dict:
    ok = [r for r in records if r.status == "success"]
    q = quality_means(ok)
    return {"epsilon": eps, **{k: q[k] for k in ("id_similarity", "id_retention", "perceptual", "esnle", "tv")},
            "asr": white_box_asr(records), "n_success": len(ok)}


def quality_means(records: Sequence[RunRecord]) -> dict:
    keys = ("tv", "esnle", "perceptual", "id_similarity")
    if not records:
        return {**{k: float("nan") for k in keys}, "id_retention": float("nan")}
    out = {k: float(np.mean([r.quality[k] for r in records])) for k in keys}
    out["id_retention"] = float(np.mean([r.quality["id_similarity"] >= ID_THRESHOLD for r in records]))
    return out


QUALITY_COLUMNS = ("method", "source", "tv", "esnle", "perceptual", "id_similarity", "id_retention", "n")


def quality_table(records: Sequence[RunRecord], source: str | None = None) -> list[dict]:
    """Per-method quality means over successful white-box examples."""
    methods = sorted({r.attack_method for r in records}, key=_method_order)
    rows = []
    for m in methods:
        ok = [r for r in records if r.attack_method == m and r.status == "success"
              and (source is None or r.source_detector == source)]
        rows.append({"method": m, "source": source or "all", **quality_means(ok), "n": len(ok)})
    return rows


def _method_order(m: str) -> tuple:
    order = ("fgsm", "pgd", "mifgsm", "latent")
    return (order.index(m) if m in order else len(order), m)


def latent_delta_profile(records: Iterable[RunRecord]) -> dict[str, tuple[float, float, float]]:
    """Mean |delta W| per style level, per dataset tag, over successful latent attacks."""
    groups: dict[str, list] = {}
    for r in records:
        if r.attack_method == "latent" and r.status == "success" and r.latent_delta_per_level is not None:
            groups.setdefault(r.dataset, []).append(r.latent_delta_per_level)
    if not groups:
        raise ValueError("no successful latent-attack records")
    return {k: tuple(float(v) for v in np.mean(np.array(v), axis=0)) for k, v in sorted(groups.items())}


def video_verdict(frame_scores: Sequence[float]) -> Label:
    """Video-level verdict: mean frame score thresholded like a frame."""
    if len(frame_scores) == 0:
        raise ValueError("video has no frames")
    return scalar_to_label(float(np.mean(frame_scores)))


def video_asr(records: Sequence[RunRecord], video_of: dict[str, str]) -> list[list]:
    """Video-level ASR rows ``[method, source, evaluator, n_videos, asr]``.

    Frame scores are averaged per video before thresholding; frames without
    a video id are ignored.
    """
    groups: dict[tuple, dict[str, list]] = {}
    targets = {}
    for r in records:
        vid = video_of.get(r.image_id)
        if vid is None or r.status == "error":
            continue
        for ev, score in r.scores.items():
            key = (r.attack_method, r.source_detector, ev)
            groups.setdefault(key, {}).setdefault(vid, []).append(score)
            targets[key] = r.target
    rows = []
    for key in sorted(groups):
        videos = groups[key]
        hits = [video_verdict(s).value == targets[key] for s in videos.values()]
        rows.append([*key, len(videos), float(np.mean(hits))])
    return rows


# -- output ---------------------------------------------------------------------------------


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    return v


def format_table(header: Sequence[str], rows: Iterable[Sequence], title: str | None = None) -> str:
    """Aligned plain-text table."""
    cells = [[str(h) for h in header]] + [[str(_fmt(v)) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [title] if title else []
    lines.append("  ".join(c.rjust(w) for c, w in zip(cells[0], widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells[1:]]
    return "\n".join(lines)


def matrix_report(m: TransferMatrix, subset: str = "all") -> str:
    label = "ASR % over all attacked images" if subset == "all" else "ASR % over source-successful images"
    return format_table(["source\\eval", *m.detectors], m.rows(subset), title=f"[{m.method}] {label}")
