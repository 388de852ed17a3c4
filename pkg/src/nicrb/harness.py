"""Batch evaluation: codec zoo, attack grid, defenses and reports.

A grid cell is (image, codec, attack, loss, preset, defense). Cells that
share everything but the defense reuse one adversarial example when the
attacker is unaware of the defense. Every cell gets a seed derived from
the root seed and its coordinates, so results do not depend on worker
scheduling. Completed cells are appended to ``ledger.jsonl`` and skipped
on the next run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np
import yaml

from . import attacks as atk
from . import codecs as cdc
from . import defenses as dfn
from . import metrics as met
from .imageio import ingest_corpus, save_png, synthetic_corpus

log = logging.getLogger(__name__)

SCHEMA_VERSION = "nicrb-report/1"
DEFAULT_METRICS = ("psnr", "mse", "ms-ssim")
KEY_FIELDS = ("image", "codec", "attack", "loss", "preset", "defense")
GROUP_FIELDS = ("codec", "attack", "loss", "defense")


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------------- config


@dataclass
class CodecEntry:
    """A codec in the zoo: a checkpoint to load or a model to train."""

    id: str
    arch: str = "factorized"
    lam: float = 0.001
    checkpoint: str | None = None
    steps: int = 1000
    seed: int = 0
    bitrate: str = ""
    train_corpus: dict | str | None = None


@dataclass
class RunConfig:
    corpus: str | dict
    codecs: list[CodecEntry]
    attacks: list[str]
    losses: list[str]
    root_seed: int
    output: str = "nicrb-out"
    presets: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    defenses: list = field(default_factory=lambda: ["none"])
    metrics: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    image_size: int | None = None
    workers: int = 1
    defense_aware: bool = False
    transfer: bool = False
    save_examples: bool = False
    attack_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.root_seed is None:
            raise ConfigError("root_seed is mandatory")
        self.codecs = [c if isinstance(c, CodecEntry) else CodecEntry(**c) for c in self.codecs]
        ids = [c.id for c in self.codecs]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate codec ids in {ids}")
        for c in self.codecs:
            if c.arch not in cdc.ARCHITECTURES:
                raise ConfigError(f"codec {c.id}: unknown architecture {c.arch!r}")
        for a in self.attacks:
            if a not in atk.ALGORITHMS:
                raise ConfigError(f"unknown attack {a!r}")
        for loss in self.losses:
            parse_loss(loss)
        for p in self.presets:
            if not 0 <= int(p) < len(atk.PRESETS):
                raise ConfigError(f"preset index {p} out of range")
        for d in self.defenses:
            did = d if isinstance(d, str) else d.get("id")
            if did not in dfn.DEFENSE_IDS:
                raise ConfigError(f"unknown defense {did!r}")
        for m in self.metrics:
            met.get_metric(m)
        if not self.codecs or not self.attacks or not self.losses:
            raise ConfigError("config needs at least one codec, attack and loss")

    @classmethod
    def from_file(cls, path, **overrides) -> RunConfig:
        """Load YAML (or JSON). Values in the file win over ``overrides``."""
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        merged = {k: v for k, v in overrides.items() if v is not None}
        merged.update(data)
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def parse_loss(name: str) -> atk.LossTarget:
    """``reconstruction`` or ``reconstruction-y`` (luma only)."""
    try:
        if name.endswith("-y"):
            return atk.LossTarget(name[:-2], y_only=True)
        return atk.LossTarget(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def defense_id(d) -> str:
    return d if isinstance(d, str) else d["id"]


def cell_seed(root_seed: int, *coords) -> int:
    h = hashlib.sha256(repr((int(root_seed),) + tuple(str(c) for c in coords)).encode()).digest()
    return int.from_bytes(h[:4], "little")


# -------------------------------------------------------------------- corpus


def load_corpus(spec, size: int | None = None) -> tuple[list[str], list[np.ndarray]]:
    """A directory path, or ``{"synthetic": {"n": .., "size": .., "seed": ..}}``."""
    if isinstance(spec, dict) and "synthetic" in spec:
        s = dict(spec["synthetic"])
        n, sz, seed = int(s.get("n", 24)), int(s.get("size", size or 64)), int(s.get("seed", 0))
        return [f"synth{i:03d}" for i in range(n)], synthetic_corpus(n, sz, seed)
    return ingest_corpus(spec, size)


# --------------------------------------------------------------------- codecs


def prepare_codecs(config: RunConfig, model_dir: Path) -> dict[str, Path]:
    """Load or train every codec; returns checkpoint paths by id."""
    model_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for entry in config.codecs:
        if entry.checkpoint:
            path = Path(entry.checkpoint)
            model = cdc.load(path)
        else:
            path = model_dir / f"{entry.id}.nicrb"
            if path.exists():
                model = cdc.load(path)
            else:
                tc = entry.train_corpus or {"synthetic": {"n": 100, "size": 64, "seed": 1000 + entry.seed}}
                _, train_images = load_corpus(tc)
                model = cdc.CodecModel(entry.arch, cdc.init_params(entry.arch, entry.seed), lam=entry.lam,
                                       seed=entry.seed, id=entry.id, bitrate_label=entry.bitrate)
                log.info("training %s (%s, lambda=%g, %d steps)", entry.id, entry.arch, entry.lam, entry.steps)
                model = cdc.train(model, train_images, entry.lam, steps=entry.steps, seed=entry.seed)
                cdc.save(model, path)
        if model.arch != entry.arch:
            raise ConfigError(f"codec {entry.id}: checkpoint holds {model.arch}, config says {entry.arch}")
        paths[entry.id] = path
    return paths


_MODEL_CACHE: dict[tuple[str, int], cdc.CodecModel] = {}


def _model(path) -> cdc.CodecModel:
    # keyed by mtime so a retrained checkpoint at the same path is reloaded
    key = (str(path), Path(path).stat().st_mtime_ns)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = cdc.load(path)
    return _MODEL_CACHE[key]


# ---------------------------------------------------------------------- cells


@dataclass(frozen=True)
class Task:
    """All cells of one (image, codec, attack, loss, preset) group."""

    image: str
    codec: str
    attack: str
    loss: str
    preset: int
    defenses: tuple
    seed: int


def _record_base(task: Task, defense: str, codec_label: str) -> dict:
    return {"image": task.image, "codec": task.codec, "bitrate": codec_label, "attack": task.attack,
            "loss": task.loss, "preset": task.preset, "defense": defense}


def _defended(model, d, seed: int):
    if defense_id(d) == "none":
        return model
    return dfn.DefendedCodec(model, d, seed=seed)


def _encode(codec, x: np.ndarray) -> tuple[np.ndarray, float]:
    # one forward gives both the reconstruction and the rate; randomized
    # defenses must not be resampled between the two
    if hasattr(codec, "forward"):
        out = codec.forward(x[None])
        return out.x_hat.data[0], float(np.mean(out.bpp.data))
    return np.asarray(codec(x), dtype=np.float64), 0.0


def evaluate_pair(model, codec, x: np.ndarray, x_adv: np.ndarray, metrics: Sequence[str]) -> dict:
    """Δ-scores, rates and artifact scores for one (x, x') pair under ``codec``."""
    rec_clean, bpp_clean = _encode(codec, x)
    rec_adv, bpp_adv = _encode(codec, x_adv)
    out = {}
    for m in metrics:
        fr = met.get_metric(m)
        out[f"delta_{fr.id.replace('-', '_')}"] = float(fr(x, rec_clean) - fr(x_adv, rec_adv))
    out["bpp_clean"] = bpp_clean
    out["bpp_adv"] = bpp_adv
    out["bpp_change"] = (bpp_adv - bpp_clean) / bpp_clean if bpp_clean > 0 else 0.0
    out["color_score"] = met.color_artifact(x_adv, rec_adv)
    out["texture_score"] = met.texture_artifact(x_adv, rec_adv, target_bpp=max(bpp_adv, 1e-3))
    return out


def run_task(task: Task, image: np.ndarray, model_path: str, metrics: Sequence[str],
             aware: bool, options: dict, example_dir: str | None) -> list[dict]:
    """Execute one group of cells; failures become tagged records."""
    model = _model(model_path)
    label = model.bitrate_label or model.id
    records = []
    spec = atk.AttackSpec.from_preset(task.attack, parse_loss(task.loss), task.preset, seed=task.seed,
                                      **options.get(task.attack, {}))
    shared = None
    for d in task.defenses:
        did = defense_id(d)
        rec = _record_base(task, did, label)
        dseed = cell_seed(task.seed, did)
        t0 = time.perf_counter()
        try:
            codec = _defended(model, d, dseed)
            if aware and did != "none":
                ex = atk.run_attack(spec, _defended(model, d, dseed + 1), image)
            else:
                if shared is None:
                    shared = atk.run_attack(spec, model, image)
                ex = shared
            rec.update(evaluate_pair(model, codec, image, ex.x_adv, metrics))
            rec.update(linf=ex.linf, l2=ex.l2, best_loss=ex.best_loss, iterations=len(ex.loss_trace) - 1,
                       seed=task.seed, status="ok", error="")
            if isinstance(codec, dfn.DefendedCodec):
                rec["defense_params"] = json.dumps([getattr(s, "actions", s) for s in codec.last_samples])
            if example_dir and did == "none":
                stem = Path(example_dir) / f"{task.image}_{task.codec}_{task.attack}_{task.loss}_p{task.preset}"
                save_png(stem.with_suffix(".png"), ex.x_adv)
                stem.with_suffix(".json").write_text(json.dumps({
                    "spec": {"algorithm": spec.algorithm, "loss": spec.loss.label, "epsilon": spec.epsilon,
                             "step": spec.step, "iterations": spec.iterations, "seed": spec.seed},
                    "linf": ex.linf, "l2": ex.l2, "loss_trace": ex.loss_trace}, indent=1))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.warning("cell %s failed: %s", rec, exc)
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", seed=task.seed)
        rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
    return records


def cell_key(rec: dict) -> tuple:
    return tuple(str(rec[k]) for k in KEY_FIELDS)


def build_tasks(config: RunConfig, image_ids: Sequence[str]) -> list[Task]:
    tasks = []
    defenses = tuple(config.defenses)
    for image in image_ids:
        for c in config.codecs:
            for a in config.attacks:
                for loss in config.losses:
                    for p in config.presets:
                        seed = cell_seed(config.root_seed, image, c.id, a, loss, p)
                        tasks.append(Task(image, c.id, a, loss, int(p), defenses, seed))
    return tasks


# ---------------------------------------------------------------------- ledger


class Ledger:
    """Append-only JSONL of finished cells; the parent process is the only writer."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.done: dict[tuple, dict] = {}
        if self.path.exists():
            with open(self.path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self.done[cell_key(rec)] = rec

    def completed(self, key: tuple) -> bool:
        rec = self.done.get(key)
        return rec is not None and rec.get("status") == "ok"

    def append(self, records: Iterable[dict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
                self.done[cell_key(rec)] = rec


# ------------------------------------------------------------------- running


@dataclass
class GridResult:
    records: list[dict]
    aggregates: list[dict]
    transfer: tuple[list[str], np.ndarray] | None
    bsq: list[dict]
    config: RunConfig
    skipped: int = 0


def run_grid(config: RunConfig) -> GridResult:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    ids, images = load_corpus(config.corpus, config.image_size)
    by_id = dict(zip(ids, images))
    paths = prepare_codecs(config, out / "models")
    ledger = Ledger(out / "ledger.jsonl")
    tasks = build_tasks(config, ids)
    todo, skipped = [], 0
    for t in tasks:
        keys = [cell_key({"image": t.image, "codec": t.codec, "attack": t.attack, "loss": t.loss,
                          "preset": t.preset, "defense": defense_id(d)}) for d in t.defenses]
        if all(ledger.completed(k) for k in keys):
            skipped += 1
        else:
            todo.append(t)
    example_dir = None
    if config.save_examples:
        example_dir = out / "examples"
        example_dir.mkdir(exist_ok=True)
    args = [(t, by_id[t.image], str(paths[t.codec]), tuple(config.metrics), config.defense_aware,
             config.attack_options, str(example_dir) if example_dir else None) for t in todo]
    if config.workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_task, *a) for a in args]
            for fut in futures:
                ledger.append(fut.result())
    else:
        for a in args:
            ledger.append(run_task(*a))

    order = {cell_key({"image": t.image, "codec": t.codec, "attack": t.attack, "loss": t.loss,
                       "preset": t.preset, "defense": defense_id(d)}): i
             for i, (t, d) in enumerate((t, d) for t in tasks for d in t.defenses)}
    records = sorted((r for k, r in ledger.done.items() if k in order), key=lambda r: order[cell_key(r)])
    transfer = transfer_report(config, by_id, paths) if config.transfer else None
    bsq = bsq_report(config, images, paths)
    return GridResult(records, aggregate(records), transfer, bsq, config, skipped)


def aggregate(records: Sequence[dict]) -> list[dict]:
    """Uniform means over presets and images per (codec, attack, loss, defense)."""
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault(tuple(r[k] for k in GROUP_FIELDS), []).append(r)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if m.get("status") == "ok"]
        row = dict(zip(GROUP_FIELDS, key))
        row["n"] = len(ok)
        row["n_failed"] = len(members) - len(ok)
        for f in numeric_fields(ok):
            row[f] = float(np.mean([m[f] for m in ok])) if ok else float("nan")
        out.append(row)
    return out


_NUMERIC_SKIP = {"preset", "seed", "iterations", "wall_time"}


def numeric_fields(records: Sequence[dict]) -> list[str]:
    if not records:
        return []
    return [k for k, v in records[0].items()
            if isinstance(v, (int, float)) and not isinstance(v, bool) and k not in _NUMERIC_SKIP]


def transfer_report(config: RunConfig, images: dict, paths: dict) -> tuple[list[str], np.ndarray]:
    """Δ̂ PSNR matrix over codecs, from ifgsm/ftda-default examples (preset 1)."""
    models = {cid: _model(p) for cid, p in paths.items()}
    adversarial = {}
    for cid, m in models.items():
        pairs = []
        for image_id, x in images.items():
            seed = cell_seed(config.root_seed, "transfer", image_id, cid)
            spec = atk.AttackSpec.from_preset("ifgsm", "ftda-default", 1, seed=seed)
            pairs.append((x, atk.run_attack(spec, m, x).x_adv))
        adversarial[cid] = pairs
    return met.transfer_matrix("psnr", models, adversarial)


def bsq_report(config: RunConfig, images: Sequence[np.ndarray], paths: dict) -> list[dict]:
    """BSQ-rate of every architecture family against the first family."""
    fams: dict[str, list] = {}
    for c in config.codecs:
        fams.setdefault(c.arch, []).append(_model(paths[c.id]))
    curves = {a: cdc.rd_curve(ms, images, "psnr") for a, ms in fams.items() if len(ms) >= 2}
    if not curves:
        return []
    ref_arch = next(iter(curves))
    rows = []
    for arch, curve in curves.items():
        try:
            value = met.bsq_rate(curves[ref_arch].points, curve.points)
        except ValueError as exc:
            log.warning("BSQ-rate for %s: %s", arch, exc)
            value = float("nan")
        rows.append({"family": arch, "reference": ref_arch, "bsq_rate": value,
                     "points": [[p.bpp, p.quality] for p in curve.points]})
    return rows


# ------------------------------------------------------------------- reports


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 12)) if np.isfinite(v) else ("nan" if np.isnan(v) else repr(v))
    return v


def _matrix_rows(records, row_key, col_key, value):
    rows = sorted({r[row_key] for r in records})
    cols = sorted({r[col_key] for r in records})
    cells = {}
    for r in records:
        cells.setdefault((r[row_key], r[col_key]), []).append(r[value])
    table = [[rk] + [float(np.mean(cells[(rk, ck)])) if (rk, ck) in cells else float("nan") for ck in cols]
             for rk in rows]
    return [row_key + "\\" + col_key] + cols, table


def emit_reports(result: GridResult | Sequence[dict], out_dir=None) -> list[Path]:
    """Write CSV tables (one per figure analog) and a JSON summary."""
    if not isinstance(result, GridResult):
        records = list(result)
        result = GridResult(records, aggregate(records), None, [], None)
    records = result.records
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir or (result.config.output if result.config else "."))
    out.mkdir(parents=True, exist_ok=True)
    files = []
    ok = [r for r in records if r.get("status") == "ok"]

    all_keys = []
    for r in records:
        for k in r:
            if k not in all_keys and k != "wall_time":
                all_keys.append(k)
    files.append(_write_csv(out / "records.csv", all_keys, ([r.get(k, "") for k in all_keys] for r in records)))

    agg_keys = []
    for r in result.aggregates:
        for k in r:
            if k not in agg_keys:
                agg_keys.append(k)
    files.append(_write_csv(out / "aggregates.csv", agg_keys,
                            ([r.get(k, "") for k in agg_keys] for r in result.aggregates)))

    delta_fields = [k for k in numeric_fields(ok) if k.startswith("delta_")]
    undefended = [r for r in ok if r["defense"] == "none"]

    # per-loss Δ bars
    long = []
    for loss in sorted({r["loss"] for r in undefended}):
        sub = [r for r in undefended if r["loss"] == loss]
        for f in delta_fields:
            long.append([loss, f, float(np.mean([r[f] for r in sub])), len(sub)])
    files.append(_write_csv(out / "fig2_loss_deltas.csv", ["loss", "metric", "mean", "n"], long))

    # codec x attack heatmap (higher Δ = less robust)
    if undefended:
        header, table = _matrix_rows(undefended, "codec", "attack", "delta_psnr")
        files.append(_write_csv(out / "fig3_codec_attack_dpsnr.csv", header, table))
        header, table = _matrix_rows(undefended, "codec", "attack", "bpp_change")
        files.append(_write_csv(out / "fig4_bpp_change.csv", header, table))

    # correlations
    try:
        fields = [f for f in met.CORRELATION_FIELDS if ok and f in ok[0]]
        labels, corr = met.correlation_report(ok, "pearson", min_records=3, fields=fields)
        files.append(_write_csv(out / "fig6_correlations.csv", ["field"] + labels,
                                ([lab] + list(map(float, row)) for lab, row in zip(labels, corr))))
    except ValueError as exc:
        log.info("skipping correlation table: %s", exc)

    if result.transfer is not None:
        names, mat = result.transfer
        files.append(_write_csv(out / "fig7_transfer_dpsnr.csv", ["source\\target"] + names,
                                ([n] + list(map(float, row)) for n, row in zip(names, mat))))

    if ok:
        header, table = _matrix_rows(ok, "defense", "attack", "delta_psnr")
        files.append(_write_csv(out / "fig8_defense_dpsnr.csv", header, table))

    if result.bsq:
        files.append(_write_csv(out / "fig9_bsq_rate.csv", ["family", "reference", "bsq_rate"],
                                ([b["family"], b["reference"], b["bsq_rate"]] for b in result.bsq)))

    summary = {
        "schema": SCHEMA_VERSION,
        "records": len(records),
        "failed": len(records) - len(ok),
        "aggregates": [{k: (v if not isinstance(v, float) or np.isfinite(v) else None) for k, v in a.items()}
                       for a in result.aggregates],
        "files": sorted(p.name for p in files),
        "orientation": "heatmaps: rows are codecs or defenses, columns attacks; larger delta means less robust",
    }
    if result.transfer is not None:
        summary["transfer"] = {"codecs": result.transfer[0], "matrix": result.transfer[1].tolist()}
    if result.bsq:
        summary["bsq_rate"] = [{k: (v if not isinstance(v, float) or np.isfinite(v) else None)
                                for k, v in b.items()} for b in result.bsq]
    validate_summary(summary)
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    files.append(path)
    return files


def load_schema() -> dict:
    return json.loads(resources.files("nicrb").joinpath("schemas/report.schema.json").read_text())


def validate_summary(summary: dict) -> None:
    jsonschema.validate(summary, load_schema())


def load_records(path) -> list[dict]:
    """Records from a ledger file or an output directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "ledger.jsonl"
    led = Ledger(path)
    return list(led.done.values())


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
