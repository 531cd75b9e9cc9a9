"""Experiment orchestration.

Covers the flat ``key = value`` configuration format, the per-subset-size
fine-tuning schedule, cached source models, the restartable fine-tuning
sweep, accuracy deltas, influence reports and PGM/PPM image dumps.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, get_args, get_origin, get_type_hints

import numpy as np

from .adversary import AttackConfig, PerturbationConstraint, feature_visualize, robust_accuracy
from .datasets import Dataset, DomainPairConfig, load_idx, resize_dataset, synth_domain_pair
from .gradcore import Network, NetworkSpec, checkpoint_bytes, init_network, load_checkpoint, minimal_spec
from .influence import HessianTarget, influence_matrix, top_majority_match, topk_label_match
from .trainer import OptimizerHyper, TrainConfig, evaluate, fmt_float, train
from .transfer import FineTuneConfig, FreezePlan, SubsetSpec, fine_tune, seed_set, subset_indices

log = logging.getLogger(__name__)

RECORD_HEADER = ("dataset", "model_tag", "constraint", "eps", "blocks", "subset_size", "seed", "epoch",
                 "test_accuracy")
IMAGENET_DIM = 224 * 224 * 3
FULL_SCALE_EPS = {"l2": 3.0, "linf": 4.0 / 255.0}
EVAL_STEP_SCALE = 2.5


class ConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentSection:
    name: str = "synthetic"
    out: str = "runs/synthetic"


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"
    source_dir: str = ""
    target_dir: str = ""
    target_name: str = ""
    train_limit: int = 0
    test_limit: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'idx', got {self.kind!r}")


@dataclass(frozen=True)
class NetSection:
    kind: str = "dense"
    blocks: int = 4
    width: int = 64


@dataclass(frozen=True)
class SourceSection:
    models: tuple[str, ...] = ("natural", "pgd20")
    constraint: str = "l2"
    eps: str = "scaled"
    step_scale: float = 2.5
    epochs: int = 40
    lr: float = 0.03
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (20, 30)
    seed: int = 0
    replicates: int = 1

    def __post_init__(self):
        for tag in self.models:
            parse_model_tag(tag)
        if self.replicates < 1:
            raise ConfigError("source.replicates must be >= 1")


@dataclass(frozen=True)
class FineTuneSection:
    subset_sizes: tuple[int, ...] = (20, 40, 80, 160, 320)
    blocks: tuple[int, ...] = (0, 1, 2)
    seeds: int = 5
    lr: float = 0.1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epoch_scale: float = 0.3
    size_scale: float = 5.0


@dataclass(frozen=True)
class InfluenceSection:
    models: tuple[str, ...] = ("natural", "pgd20")
    blocks: int = 0
    subset_size: int = 40
    test_size: int = 50
    k: tuple[int, ...] = (1, 2, 3, 4, 5)
    majority_k: int = 5
    majority_m: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    synthetic: DomainPairConfig = field(default_factory=DomainPairConfig)
    net: NetSection = field(default_factory=NetSection)
    source: SourceSection = field(default_factory=SourceSection)
    finetune: FineTuneSection = field(default_factory=FineTuneSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)

    @property
    def out(self) -> Path:
        return Path(self.experiment.out)


SECTIONS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def _convert(text: str, kind, key: str):
    try:
        if get_origin(kind) is tuple:
            item = get_args(kind)[0]
            return tuple(item(p.strip()) for p in text.split(",") if p.strip())
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; duplicates are errors."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def config_from_entries(entries: dict[str, str], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply dotted ``section.field`` entries on top of ``base``; unknown keys are errors."""
    base = base or ExperimentConfig()
    updates: dict[str, dict] = defaultdict(dict)
    for key, value in entries.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown configuration key {key!r}")
        current = getattr(base, section)
        hints = get_type_hints(type(current))
        if name not in hints:
            raise ConfigError(f"unknown configuration key {key!r}")
        updates[section][name] = _convert(value, hints[name], key)
    try:
        return replace(base, **{s: replace(getattr(base, s), **kv) for s, kv in updates.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: Optional[dict[str, str]] = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = config_from_entries(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    if overrides:
        cfg = config_from_entries(overrides, cfg)
    return cfg


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical text: every key, sorted, one per line."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def fingerprint(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# schedules and source models

@dataclass(frozen=True)
class ScheduleRow:
    max_images: Optional[int]
    epochs: int
    seeds: int
    eval_every: int


# full-scale subset size bracket -> fine-tuning epochs, seeds, evaluation period
FINETUNE_TABLE = (
    ScheduleRow(1600, 100, 20, 20),
    ScheduleRow(6400, 150, 10, 10),
    ScheduleRow(25600, 150, 5, 10),
    ScheduleRow(None, 150, 1, 10),
)


@dataclass(frozen=True)
class CellSchedule:
    epochs: int
    seeds: int
    eval_epochs: tuple[int, ...]
    decay_epochs: tuple[int, ...]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def schedule_for(subset_size: int, epoch_scale: float = 1.0, size_scale: float = 1.0,
                 max_seeds: Optional[int] = None) -> CellSchedule:
    """Epochs, seed count, evaluation epochs and LR milestones for one subset size.

    ``subset_size * size_scale`` selects the table row; epoch counts and the
    evaluation period are multiplied by ``epoch_scale``.  Evaluation happens
    after epoch 1, every period after that, and at the last epoch; the LR
    drops at 1/3 and 2/3 of the epochs.
    """
    if subset_size < 1 or epoch_scale <= 0 or size_scale <= 0:
        raise ValueError("subset_size, epoch_scale and size_scale must be positive")
    full_size = subset_size * size_scale
    row = next(r for r in FINETUNE_TABLE if r.max_images is None or full_size <= r.max_images)
    epochs = max(1, _round_half_up(row.epochs * epoch_scale))
    every = max(1, _round_half_up(row.eval_every * epoch_scale))
    evals = tuple(sorted(set(range(1, epochs + 1, every)) | {epochs}))
    decay = tuple(sorted({epochs * k // 3 for k in (1, 2)} - {0}))
    seeds = row.seeds if max_seeds is None else min(row.seeds, max_seeds)
    return CellSchedule(epochs, seeds, evals, decay)


@dataclass(frozen=True)
class SourceModel:
    tag: str
    adversary: str
    steps: int = 0


def parse_model_tag(tag: str) -> SourceModel:
    """``natural``, ``gaussian`` or ``pgd<k>``."""
    if tag == "natural":
        return SourceModel(tag, "none")
    if tag == "gaussian":
        return SourceModel(tag, "gaussian")
    m = re.fullmatch(r"pgd(\d+)", tag)
    if m and int(m.group(1)) >= 1:
        return SourceModel(tag, "pgd", int(m.group(1)))
    raise ConfigError(f"unknown source model tag {tag!r}; use natural, gaussian or pgd<k>")


def model_tag(adversary: str, steps: int = 20) -> str:
    return {"none": "natural", "gaussian": "gaussian"}.get(adversary) or f"pgd{steps}"


def resolve_eps(cfg: ExperimentConfig, input_shape) -> float:
    """``full`` uses the ImageNet-scale value, ``scaled`` shrinks an L2
    radius by sqrt(d / d_imagenet); anything else is a number."""
    norm, text = cfg.source.constraint, cfg.source.eps
    if norm not in FULL_SCALE_EPS:
        raise ConfigError(f"source.constraint must be l2 or linf, got {norm!r}")
    if text == "full":
        return FULL_SCALE_EPS[norm]
    if text == "scaled":
        if norm == "linf":
            return FULL_SCALE_EPS[norm]
        return FULL_SCALE_EPS[norm] * math.sqrt(int(np.prod(input_shape)) / IMAGENET_DIM)
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"source.eps must be 'full', 'scaled' or a number, got {text!r}") from None


def constraint_for(cfg: ExperimentConfig, input_shape) -> PerturbationConstraint:
    return PerturbationConstraint(cfg.source.constraint, resolve_eps(cfg, input_shape))


def adversary_for(model: SourceModel, constraint: PerturbationConstraint, step_scale: float = 2.5):
    if model.adversary == "none":
        return None
    if model.adversary == "gaussian":
        return constraint
    # one step of size 2 eps lands on the boundary, like a step of 6 at eps 3
    scale = 2.0 if model.steps == 1 else step_scale
    return AttackConfig(constraint, model.steps, scale)


def record_constraint(model: SourceModel, constraint: PerturbationConstraint) -> tuple[str, float]:
    if model.adversary == "none":
        return "none", 0.0
    return constraint.norm, constraint.eps


# ---------------------------------------------------------------------------
# data

@dataclass
class ExperimentData:
    source_train: Dataset
    source_test: Dataset
    target_train: Dataset
    target_test: Dataset
    name: str


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _load_idx_dir(directory, split: str) -> Dataset:
    images, labels = IDX_FILES[split]
    directory = Path(directory)
    return load_idx(directory / images, directory / labels, f"{directory.name}-{split}")


def _head(data: Dataset, limit: int) -> Dataset:
    return data if not limit or limit >= len(data) else data.subset(np.arange(limit))


def load_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.data
    if d.kind == "synthetic":
        src_tr, tgt_tr = synth_domain_pair(cfg.synthetic, "train")
        src_te, tgt_te = synth_domain_pair(cfg.synthetic, "test")
        name = d.target_name or "synthetic"
    else:
        if not d.source_dir or not d.target_dir:
            raise ConfigError("data.kind = idx needs data.source_dir and data.target_dir")
        src_tr, src_te = _load_idx_dir(d.source_dir, "train"), _load_idx_dir(d.source_dir, "test")
        tgt_tr, tgt_te = _load_idx_dir(d.target_dir, "train"), _load_idx_dir(d.target_dir, "test")
        name = d.target_name or Path(d.target_dir).name
    return ExperimentData(_head(src_tr, d.train_limit), _head(src_te, d.test_limit), tgt_tr,
                          _head(tgt_te, d.test_limit), name)


def network_spec(cfg: ExperimentConfig, data: ExperimentData) -> NetworkSpec:
    return minimal_spec(data.source_train.image_shape, cfg.net.blocks, cfg.net.width,
                        data.source_train.num_labels, cfg.net.kind)


def _data_payload(cfg: ExperimentConfig) -> dict:
    payload = dataclasses.asdict(cfg.data)
    if cfg.data.kind == "synthetic":
        payload["synthetic"] = dataclasses.asdict(cfg.synthetic)
    return payload


# ---------------------------------------------------------------------------
# source models

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def source_paths(out, tag: str, replicate: int) -> tuple[Path, Path]:
    base = Path(out) / "sources" / f"{tag}-r{replicate}"
    return base.with_suffix(".ckpt"), base.with_suffix(".json")


def source_payload(cfg: ExperimentConfig, spec: NetworkSpec, tag: str, replicate: int, eps: float) -> dict:
    s = cfg.source
    return {
        "net": spec.to_string(),
        "data": _data_payload(cfg),
        "model": tag,
        "constraint": s.constraint,
        "eps": fmt_float(eps),
        "step_scale": fmt_float(s.step_scale),
        "train": {"epochs": s.epochs, "lr": fmt_float(s.lr), "batch_size": s.batch_size,
                  "momentum": fmt_float(s.momentum), "weight_decay": fmt_float(s.weight_decay),
                  "decay_epochs": list(s.decay_epochs)},
        "seed": s.seed + replicate,
    }


def train_source(cfg: ExperimentConfig, data: ExperimentData, tag: str, replicate: int = 0):
    """Train one source model from scratch; returns ``(net, history, summary)``."""
    spec = network_spec(cfg, data)
    constraint = constraint_for(cfg, spec.input_shape)
    model = parse_model_tag(tag)
    s = cfg.source
    seed = s.seed + replicate
    hyper = OptimizerHyper(s.lr, s.batch_size, s.momentum, s.weight_decay, 10.0, s.decay_epochs)
    tcfg = TrainConfig(hyper, s.epochs, adversary_for(model, constraint, s.step_scale), seed)
    net, history = train(init_network(spec, seed), data.source_train, tcfg)
    attack = AttackConfig(constraint, 20, EVAL_STEP_SCALE)
    summary = {
        "clean_accuracy": evaluate(net, data.source_test),
        "robust_accuracy": robust_accuracy(net, data.source_test.images, data.source_test.labels, attack),
    }
    return net, history, summary


def ensure_source(cfg: ExperimentConfig, data: ExperimentData, out, tag: str, replicate: int) -> Network:
    """Load the cached source model for ``(tag, replicate)`` or train and cache it.

    The cache is keyed by a fingerprint of everything that shapes the model;
    a mismatch or an unreadable file raises :class:`SweepError` naming the cell.
    """
    spec = network_spec(cfg, data)
    eps = resolve_eps(cfg, spec.input_shape)
    fp = fingerprint(source_payload(cfg, spec, tag, replicate, eps))
    ckpt, meta_path = source_paths(out, tag, replicate)
    cell = f"source {tag}/r{replicate}"
    if ckpt.exists() or meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
            raw = ckpt.read_bytes()
        except (OSError, ValueError) as exc:
            raise SweepError(f"{cell}: unreadable cache entry ({exc})") from exc
        if meta.get("fingerprint") != fp:
            raise SweepError(f"{cell}: cached checkpoint {ckpt} was built with a different configuration")
        if hashlib.sha256(raw).hexdigest() != meta.get("sha256"):
            raise SweepError(f"{cell}: checkpoint {ckpt} does not match its recorded digest")
        try:
            return load_checkpoint(ckpt)
        except ValueError as exc:
            raise SweepError(f"{cell}: unreadable checkpoint ({exc})") from exc
    log.info("training %s", cell)
    net, history, summary = train_source(cfg, data, tag, replicate)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    raw = checkpoint_bytes(net)
    _atomic_write(ckpt, raw)
    history.write_csv(ckpt.with_suffix(".history.csv"))
    meta = {"fingerprint": fp, "sha256": hashlib.sha256(raw).hexdigest(), "model_tag": tag,
            "replicate": replicate, "seed": cfg.source.seed + replicate,
            "clean_accuracy": fmt_float(summary["clean_accuracy"]),
            "robust_accuracy": fmt_float(summary["robust_accuracy"])}
    _atomic_write(meta_path, (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode())
    return net


SOURCE_HEADER = ("model_tag", "replicate", "seed", "clean_accuracy", "robust_accuracy")


def write_source_summary(cfg: ExperimentConfig, out) -> Path:
    path = Path(out) / "sources.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SOURCE_HEADER)
        for tag in cfg.source.models:
            for r in range(cfg.source.replicates):
                meta = json.loads(source_paths(out, tag, r)[1].read_text())
                writer.writerow([tag, r, meta["seed"], meta["clean_accuracy"], meta["robust_accuracy"]])
    return path


def read_source_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["replicate"] = int(row["replicate"])
        row["clean_accuracy"] = float(row["clean_accuracy"])
        row["robust_accuracy"] = float(row["robust_accuracy"])
    return rows


# ---------------------------------------------------------------------------
# run records

@dataclass(frozen=True)
class RunRecord:
    dataset: str
    model_tag: str
    constraint: str
    eps: float
    blocks: int
    subset_size: int
    seed: int
    epoch: int
    test_accuracy: float

    @property
    def cell(self) -> tuple:
        return (self.dataset, self.model_tag, self.blocks, self.subset_size, self.seed)

    def sort_key(self) -> tuple:
        return self.cell + (self.epoch,)

    def row(self) -> list[str]:
        return [self.dataset, self.model_tag, self.constraint, fmt_float(self.eps), str(self.blocks),
                str(self.subset_size), str(self.seed), str(self.epoch), fmt_float(self.test_accuracy)]


def records_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_HEADER)
    for r in sorted(records, key=RunRecord.sort_key):
        writer.writerow(r.row())
    return buf.getvalue()


def write_records(path, records) -> None:
    _atomic_write(Path(path), records_text(records).encode())


def read_records(path) -> list[RunRecord]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != RECORD_HEADER:
                raise SweepError(f"{path}: unexpected header {header}")
            out = []
            for lineno, row in enumerate(reader, 2):
                if len(row) != len(RECORD_HEADER):
                    raise SweepError(f"{path}:{lineno}: expected {len(RECORD_HEADER)} fields, got {len(row)}")
                out.append(RunRecord(row[0], row[1], row[2], float(row[3]), int(row[4]), int(row[5]),
                                     int(row[6]), int(row[7]), float(row[8])))
    except (OSError, ValueError) as exc:
        raise SweepError(f"{path}: unreadable results file ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# the sweep

@dataclass(frozen=True)
class Cell:
    model_tag: str
    replicate: int
    blocks: int
    subset_size: int
    seed: int


def plan_cells(cfg: ExperimentConfig) -> list[Cell]:
    """Every fine-tuning run of the grid.  Seed ``i`` of a subset size uses
    source replicate ``i mod replicates``."""
    cells = []
    ft = cfg.finetune
    for tag in cfg.source.models:
        for blocks in ft.blocks:
            for n in ft.subset_sizes:
                sched = schedule_for(n, ft.epoch_scale, ft.size_scale, ft.seeds)
                for i, seed in enumerate(seed_set(sched.seeds)):
                    cells.append(Cell(tag, i % cfg.source.replicates, blocks, n, seed))
    return cells


def finetune_config(cfg: ExperimentConfig, blocks: int, subset_size: int, seed: int):
    ft = cfg.finetune
    sched = schedule_for(subset_size, ft.epoch_scale, ft.size_scale, ft.seeds)
    hyper = OptimizerHyper(ft.lr, ft.batch_size, ft.momentum, ft.weight_decay, 10.0, sched.decay_epochs)
    return FineTuneConfig(FreezePlan(blocks), SubsetSpec(subset_size, seed),
                          TrainConfig(hyper, sched.epochs, None, seed), seed), sched


_STATE: dict = {}


def _init_worker(cfg_text: str, out: str) -> None:
    cfg = config_from_entries(parse_config_text(cfg_text))
    _STATE.clear()
    _STATE.update(cfg=cfg, out=out, data=load_data(cfg), nets={})


def _run_cell(cell: Cell) -> list[RunRecord]:
    cfg, data = _STATE["cfg"], _STATE["data"]
    key = (cell.model_tag, cell.replicate)
    if key not in _STATE["nets"]:
        _STATE["nets"][key] = ensure_source(cfg, data, _STATE["out"], *key)
    net = _STATE["nets"][key]
    ft_cfg, sched = finetune_config(cfg, cell.blocks, cell.subset_size, cell.seed)
    _, history = fine_tune(net, data.target_train, ft_cfg, test_data=data.target_test,
                           eval_epochs=sched.eval_epochs)
    model = parse_model_tag(cell.model_tag)
    norm, eps = record_constraint(model, constraint_for(cfg, net.spec.input_shape))
    return [RunRecord(data.name, cell.model_tag, norm, eps, cell.blocks, cell.subset_size, cell.seed,
                      rec.epoch, rec.test_accuracy) for rec in history.evaluated()]


def _completed_cells(records, cfg: ExperimentConfig, dataset: str) -> tuple[set, list[RunRecord]]:
    expected = {}
    for cell in plan_cells(cfg):
        sched = schedule_for(cell.subset_size, cfg.finetune.epoch_scale, cfg.finetune.size_scale,
                             cfg.finetune.seeds)
        expected[(dataset, cell.model_tag, cell.blocks, cell.subset_size, cell.seed)] = set(sched.eval_epochs)
    by_cell = defaultdict(list)
    for r in records:
        by_cell[r.cell].append(r)
    done, kept = set(), []
    for key, rows in by_cell.items():
        epochs = [r.epoch for r in rows]
        if key in expected and len(epochs) == len(set(epochs)) and set(epochs) == expected[key]:
            done.add(key)
            kept.extend(rows)
    return done, kept


def run_sweep(cfg: ExperimentConfig, out=None, workers: int = 1) -> Path:
    """Run (or resume) the fine-tuning grid and return the results CSV path.

    Source models are trained once per (tag, replicate) and cached under
    ``out/sources``.  Cells whose rows are all present in ``results.csv`` are
    skipped; partial cells are dropped and recomputed.  The final file is
    sorted, so it does not depend on completion order or on restarts.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = config_to_text(cfg)
    saved = out / "config.txt"
    if saved.exists() and saved.read_text() != cfg_text:
        raise SweepError(f"{out} holds a sweep with a different configuration; see {saved}")
    _atomic_write(saved, cfg_text.encode())

    _init_worker(cfg_text, str(out))
    data = _STATE["data"]
    for tag in cfg.source.models:
        for r in range(cfg.source.replicates):
            _STATE["nets"][(tag, r)] = ensure_source(cfg, data, out, tag, r)
    write_source_summary(cfg, out)

    results = out / "results.csv"
    existing = read_records(results) if results.exists() else []
    done, kept = _completed_cells(existing, cfg, data.name)
    pending = [c for c in plan_cells(cfg)
               if (data.name, c.model_tag, c.blocks, c.subset_size, c.seed) not in done]
    log.info("%d cells complete, %d to run", len(done), len(pending))
    write_records(results, kept)

    with open(results, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")

        def emit(rows):
            for row in rows:
                writer.writerow(row.row())
            fh.flush()
            kept.extend(rows)

        if workers <= 1:
            for cell in pending:
                emit(_run_cell(cell))
        else:
            with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg_text, str(out))) as pool:
                for fut in as_completed([pool.submit(_run_cell, c) for c in pending]):
                    emit(fut.result())
    write_records(results, kept)
    return results


# ---------------------------------------------------------------------------
# reporting

@dataclass(frozen=True)
class DeltaStat:
    mean: float
    half_width: float
    deltas: tuple[float, ...]

    @property
    def ci(self) -> tuple[float, float]:
        return self.mean - self.half_width, self.mean + self.half_width


def mean_ci(values) -> DeltaStat:
    """Mean with a normal-approximation 95% interval, 1.96 * s / sqrt(n)
    using the sample standard deviation; a single value gets a NaN width."""
    values = tuple(float(v) for v in values)
    if not values:
        raise ValueError("no values")
    mean = float(np.mean(values))
    if len(values) < 2:
        return DeltaStat(mean, float("nan"), values)
    stderr = float(np.std(values, ddof=1)) / math.sqrt(len(values))
    return DeltaStat(mean, 1.96 * stderr, values)


def final_accuracies(records, epoch: Optional[int] = None) -> dict[tuple, float]:
    """Accuracy per cell at ``epoch`` (default: the last evaluated epoch)."""
    best: dict[tuple, RunRecord] = {}
    for r in records:
        if epoch is not None:
            if r.epoch == epoch:
                best[r.cell] = r
        elif r.cell not in best or r.epoch > best[r.cell].epoch:
            best[r.cell] = r
    return {k: v.test_accuracy for k, v in best.items()}


def accuracy_delta(records, model_a: str, model_b: str, epoch: Optional[int] = None) -> dict[tuple, DeltaStat]:
    """``model_a - model_b`` accuracy per (dataset, subset_size, blocks),
    paired by seed."""
    acc = final_accuracies(records, epoch)
    sides = {model_a: {}, model_b: {}}
    for (dataset, tag, blocks, n, seed), value in acc.items():
        if tag in sides:
            sides[tag][(dataset, n, blocks, seed)] = value
    a, b = sides[model_a], sides[model_b]
    missing = sorted(set(a) ^ set(b))
    if missing or not a:
        raise ValueError(f"no paired records for {model_a} vs {model_b}; unmatched "
                         f"(dataset, subset_size, blocks, seed) keys: {missing}")
    grouped = defaultdict(list)
    for key in sorted(a):
        grouped[key[:3]].append(a[key] - b[key])
    return {key: mean_ci(deltas) for key, deltas in grouped.items()}


def resnet50_block_label(blocks: int, num_blocks: int) -> str:
    """MiniNet block count -> the ResNet-50 block count it stands in for."""
    if blocks == num_blocks:
        return "9"
    return {0: "0", 1: "1", 2: "3"}.get(blocks, str(blocks))


def learning_curves(records) -> dict[tuple, DeltaStat]:
    """Mean accuracy (and CI) per (dataset, model, blocks, subset_size, epoch) over seeds."""
    grouped = defaultdict(list)
    for r in sorted(records, key=RunRecord.sort_key):
        grouped[(r.dataset, r.model_tag, r.blocks, r.subset_size, r.epoch)].append(r.test_accuracy)
    return {k: mean_ci(v) for k, v in grouped.items()}


def write_report(results_path, out_dir, model_a: str, model_b: str, num_blocks: int) -> list[Path]:
    """Delta table and learning curves as CSV."""
    records = read_records(results_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    deltas = accuracy_delta(records, model_a, model_b)
    delta_path = out_dir / f"delta_{model_a}_minus_{model_b}.csv"
    with open(delta_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "subset_size", "blocks", "resnet50_blocks", "seeds", "mean_delta", "ci_low", "ci_high"])
        for (dataset, n, blocks), stat in sorted(deltas.items()):
            lo, hi = stat.ci
            w.writerow([dataset, n, blocks, resnet50_block_label(blocks, num_blocks), len(stat.deltas),
                        fmt_float(stat.mean), fmt_float(lo), fmt_float(hi)])
    curve_path = out_dir / "curves.csv"
    with open(curve_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "model_tag", "blocks", "subset_size", "epoch", "seeds", "mean_accuracy",
                    "ci_low", "ci_high"])
        for key, stat in sorted(learning_curves(records).items()):
            lo, hi = stat.ci
            w.writerow(list(key) + [len(stat.deltas), fmt_float(stat.mean), fmt_float(lo), fmt_float(hi)])
    return [delta_path, curve_path]


# ---------------------------------------------------------------------------
# fine-tune artifacts and influence reports

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_finetune_artifacts(net: Network, subset: Dataset, indices, out_dir, meta: dict) -> dict[str, Path]:
    """Checkpoint, the exact training subset (``.npz``) and a manifest tying them together."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, subset_path, manifest = out_dir / "model.ckpt", out_dir / "subset.npz", out_dir / "manifest.json"
    _atomic_write(ckpt, checkpoint_bytes(net))
    buf = io.BytesIO()
    np.savez(buf, images=subset.images, labels=subset.labels, indices=np.asarray(indices, dtype=np.int64))
    _atomic_write(subset_path, buf.getvalue())
    body = dict(meta)
    body.update(checkpoint=ckpt.name, checkpoint_sha256=sha256_file(ckpt), subset=subset_path.name,
                subset_sha256=sha256_file(subset_path), subset_size=len(subset),
                subset_indices=[int(i) for i in indices])
    _atomic_write(manifest, (json.dumps(body, indent=1, sort_keys=True) + "\n").encode())
    return {"checkpoint": ckpt, "subset": subset_path, "manifest": manifest}


def load_manifest(checkpoint, manifest_path) -> tuple[Network, Dataset, dict]:
    """Check that ``checkpoint`` is the model the manifest describes and
    return it together with its training subset."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    digest = sha256_file(checkpoint)
    if digest != manifest.get("checkpoint_sha256"):
        raise ValueError(f"checkpoint {checkpoint} (sha256 {digest[:12]}) was not fine-tuned on the subset "
                         f"in {manifest_path} (expects {str(manifest.get('checkpoint_sha256'))[:12]})")
    subset_path = manifest_path.parent / manifest["subset"]
    if sha256_file(subset_path) != manifest.get("subset_sha256"):
        raise ValueError(f"{subset_path} does not match the digest recorded in {manifest_path}")
    with np.load(subset_path) as npz:
        images, labels, indices = npz["images"], npz["labels"], npz["indices"]
    if [int(i) for i in indices] != manifest.get("subset_indices"):
        raise ValueError(f"{subset_path} indices disagree with {manifest_path}")
    net = load_checkpoint(checkpoint)
    subset = Dataset(images, labels, manifest.get("dataset", "subset"), net.spec.num_labels)
    return net, subset, manifest


def influence_report_cmd(checkpoint, manifest_path, test_set: Dataset, k_list, out_dir,
                         majority: tuple[int, int] = (5, 3),
                         target: HessianTarget = HessianTarget()) -> dict:
    """Influence matrix of a fine-tuned checkpoint plus top-k label-match rates.

    Writes ``influence.csv`` and its ``influence.json`` sidecar and
    ``topk.csv`` (``metric,k,m,match_percent``).  Returns the match rates.
    """
    net, subset, manifest = load_manifest(checkpoint, manifest_path)
    meta = {"model_tag": manifest.get("model_tag", ""), "subset_seed": manifest.get("subset_seed"),
            "checkpoint_sha256": manifest["checkpoint_sha256"]}
    report = influence_matrix(net, subset, test_set, target, metadata=meta)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write(out_dir / "influence.csv", out_dir / "influence.json")
    rates = {("topk", k, 1): topk_label_match(report, k) for k in k_list}
    kmaj, m = majority
    if kmaj <= len(subset):
        rates[("top_majority", kmaj, m)] = top_majority_match(report, kmaj, m)
    with open(out_dir / "topk.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "k", "m", "match_percent"])
        for (metric, k, mm), value in rates.items():
            w.writerow([metric, k, mm, fmt_float(value)])
    return rates


def finetune_one(cfg: ExperimentConfig, data: ExperimentData, source: Network, tag: str, blocks: int,
                 subset_size: int, seed: int, out_dir) -> dict[str, Path]:
    """Single fine-tuning run with its checkpoint, subset, manifest and history."""
    ft_cfg, sched = finetune_config(cfg, blocks, subset_size, seed)
    net, history = fine_tune(source, data.target_train, ft_cfg, test_data=data.target_test,
                             eval_epochs=sched.eval_epochs)
    target = data.target_train
    if len(net.spec.input_shape) == 3:
        target = resize_dataset(target, *net.spec.input_shape[1:])
    idx = subset_indices(target.labels, subset_size, seed, target.num_labels)
    paths = save_finetune_artifacts(net, target.subset(idx), idx, out_dir, {
        "dataset": data.name, "model_tag": tag, "blocks": blocks, "subset_seed": seed})
    history.write_csv(Path(out_dir) / "history.csv")
    paths["history"] = Path(out_dir) / "history.csv"
    return paths


def run_influence(cfg: ExperimentConfig, out=None) -> dict[str, dict]:
    """Fine-tune each configured source model on one shared subset and
    write its influence report under ``out/influence/<tag>``."""
    out = Path(out or cfg.out)
    data = load_data(cfg)
    inf = cfg.influence
    seed = seed_set(1)[0]
    test = _head(data.target_test, inf.test_size)
    results = {}
    for tag in inf.models:
        source = ensure_source(cfg, data, out, tag, 0)
        cell_dir = out / "influence" / tag
        paths = finetune_one(cfg, data, source, tag, inf.blocks, inf.subset_size, seed, cell_dir)
        results[tag] = influence_report_cmd(paths["checkpoint"], paths["manifest"], test, inf.k, cell_dir,
                                            (inf.majority_k, inf.majority_m))
    return results


# ---------------------------------------------------------------------------
# images

def to_bytes(image) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_pnm(path, image) -> None:
    """Binary PGM (one channel) or PPM (three channels); ``image`` is
    ``(h, w)`` or ``(c, h, w)`` in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c == 1:
        magic, pixels = b"P5", to_bytes(image[0])
    elif c == 3:
        magic, pixels = b"P6", to_bytes(image.transpose(1, 2, 0))
    else:
        raise ValueError(f"PGM/PPM needs 1 or 3 channels, got {c}")
    _atomic_write(Path(path), magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, pos)
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM variant")
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * c], dtype=np.uint8)
    return (data.reshape(h, w, c).transpose(2, 0, 1) / 255.0)


def tile(images, cols: int, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Arrange ``(n, c, h, w)`` images on a grid with ``pad`` pixel gutters."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    rows = -(-n // cols)
    grid = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = img
    return grid


def visualize_classes(net: Network, seed_image, classes, steps: int = 200, alpha: float = 0.05) -> np.ndarray:
    """Feature visualisations for ``classes`` as an ``(n, c, h, w)`` stack."""
    shape = net.spec.input_shape
    if len(shape) != 3:
        raise ValueError("visualisation needs an image-shaped network input")
    seed_image = np.asarray(seed_image, dtype=np.float64).reshape(shape)
    return np.stack([feature_visualize(net, seed_image, c, steps, alpha) for c in classes])
