"""Experiment configuration, per-seed pipeline, multi-seed tables, comparisons and ablations."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import statistics
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .client import ClientConfig, client_update
from .data import DatasetHandle, PartitionedFederation, client_slice, dirichlet_partition, load_dataset
from .losses import compute_weights
from .models import ModelSpec, budget_plan, build_model, extract_submodel, load_checkpoint, save_checkpoint, slice_state
from .server import MODES, RunRecord, ServerConfig, run_server

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ABLATION_KNOBS = ("drop_tran", "drop_div", "drop_cd", "components", "merge_operator", "variant", "betas")
BETA_GRID = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)

ClientConfig.__pydantic_config__ = ConfigDict(extra="forbid")
ServerConfig.__pydantic_config__ = ConfigDict(extra="forbid")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    dataset: str = "SYNTH_TOY"
    data_root: str = "data"
    max_train: int | None = None
    max_test: int | None = None
    num_clients: int = Field(5, ge=1)
    omega: float = Field(0.5, gt=0)
    sigma: int = Field(0, ge=0)
    rho: int = Field(0, ge=0)
    model_family: str = "CNN4_BN"
    model_widths: list[int] | None = None
    shared_init: bool = False
    client: ClientConfig = Field(default_factory=ClientConfig)
    server: ServerConfig = Field(default_factory=ServerConfig)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    partition_file: str | None = None
    client_cache_dir: str | None = None
    deterministic: bool = True

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    @field_validator("dataset")
    @classmethod
    def _dataset(cls, v):
        from .data import DATASETS
        if v.upper() not in DATASETS:
            raise ValueError(f"unknown dataset {v!r}")
        return v.upper()

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @property
    def mode(self) -> str:
        return self.server.mode

    def to_json(self) -> str:
        return self.model_dump_json(indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.model_validate_json(text)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def with_updates(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``{"server.mode": "DFAD"}``; the result is revalidated."""
        data = self.model_dump()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[leaf] = value
        return type(self).model_validate(data)

    def global_spec(self, dataset: DatasetHandle) -> ModelSpec:
        widths = tuple(self.model_widths) if self.model_widths else None
        return ModelSpec(self.model_family, dataset.num_classes, dataset.image_shape, 1.0, widths)


def desk_profile(**changes) -> ExperimentConfig:
    """Small SYNTH_TOY setting used by the acceptance suite; runs on one CPU core."""
    cfg = ExperimentConfig(
        dataset="SYNTH_TOY", num_clients=5, omega=0.5, model_widths=[8, 16, 32, 64],
        client=ClientConfig(local_epochs=30, learning_rate=0.1, batch_size=64),
        server=ServerConfig(outer_iters=100, gen_inner_iters=10, distill_inner_iters=2, batch_size=64,
                            noise_dim=32, distill_lr=0.1, distill_bn_mode="eval", eval_every=1),
        seeds=[0, 1, 2],
    )
    return cfg.with_updates(**changes) if changes else cfg


# ---------------------------------------------------------------------------
# results

@dataclass
class ResultRow:
    key: str
    accs: list[float]
    failed: int = 0

    @property
    def mean(self) -> float | None:
        return statistics.fmean(self.accs) if self.accs else None

    @property
    def std(self) -> float | None:
        return statistics.stdev(self.accs) if len(self.accs) >= 2 else None

    def cell(self) -> str:
        if self.mean is None:
            return "n/a"
        text = f"{100 * self.mean:.2f}"
        return text + (f"±{100 * self.std:.2f}" if self.std is not None else "")


@dataclass
class ResultTable:
    title: str
    rows: list[ResultRow] = field(default_factory=list)

    def row(self, key: str) -> ResultRow:
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    def to_dict(self) -> dict:
        return {"title": self.title, "rows": [
            {"key": r.key, "accs": r.accs, "mean": r.mean, "std": r.std, "failed": r.failed} for r in self.rows]}

    def to_markdown(self) -> str:
        lines = [f"### {self.title}", "", "| setting | Top G.acc (%) |", "|---|---|"]
        lines += [f"| {r.key} | {r.cell()} |" for r in self.rows]
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path, stem: str = "results") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / f"{stem}.md").write_text(self.to_markdown())


@dataclass
class SeedOutcome:
    seed: int
    record: RunRecord | None
    run_dir: Path
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.record is not None and self.error is None


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class Federation:
    """Everything the server needs from the client phase of one seed."""

    dataset: DatasetHandle
    partition: PartitionedFederation
    global_spec: ModelSpec
    local_models: list[torch.nn.Module]
    label_counts: np.ndarray
    ratios: tuple[float, ...]


_dataset_cache: dict[tuple, DatasetHandle] = {}
_federation_cache: dict[str, Federation] = {}


def _dataset(cfg: ExperimentConfig) -> DatasetHandle:
    key = (cfg.dataset, cfg.data_root, cfg.max_train, cfg.max_test)
    if key not in _dataset_cache:
        _dataset_cache[key] = load_dataset(cfg.dataset, cfg.data_root, cfg.max_train, cfg.max_test)
    return _dataset_cache[key]


def _client_key(cfg: ExperimentConfig, seed: int) -> str:
    relevant = cfg.model_dump(include={"dataset", "data_root", "max_train", "max_test", "num_clients", "omega",
                                       "sigma", "rho", "model_family", "model_widths", "shared_init", "client",
                                       "partition_file"})
    return json.dumps({"seed": seed, **relevant}, sort_keys=True)


def partition_for(cfg: ExperimentConfig, seed: int) -> PartitionedFederation:
    ds = _dataset(cfg)
    if cfg.partition_file:
        fed = PartitionedFederation.load(cfg.partition_file)
        if fed.dataset != ds.name or fed.num_clients != cfg.num_clients:
            raise ValueError(f"partition file {cfg.partition_file} does not match dataset/num_clients")
        return fed
    return dirichlet_partition(ds, cfg.num_clients, cfg.omega, seed)


def _save_client_cache(fed: "Federation", cache_dir: Path, key: str) -> None:
    cache_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(fed.local_models):
        save_checkpoint(m, cache_dir / f"client{i}.npz")
    (cache_dir / "label_counts.json").write_text(json.dumps({"key": key, "counts": fed.label_counts.tolist()}))


def train_clients(cfg: ExperimentConfig, seed: int) -> Federation:
    """Partition the data and train every client for one seed (cached in memory and optionally on disk)."""
    key = _client_key(cfg, seed)
    cache_dir = Path(cfg.client_cache_dir) / f"seed{seed}" if cfg.client_cache_dir else None
    meta_path = cache_dir / "label_counts.json" if cache_dir is not None else None
    if key in _federation_cache:
        out = _federation_cache[key]
        if meta_path is not None and not meta_path.exists():
            _save_client_cache(out, cache_dir, key)
        return out
    ds = _dataset(cfg)
    fed = partition_for(cfg, seed)
    global_spec = cfg.global_spec(ds)
    ratios = budget_plan(cfg.num_clients, cfg.sigma, cfg.rho).ratios
    if meta_path is not None and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("key") == key:
            models = [load_checkpoint(cache_dir / f"client{i}.npz") for i in range(cfg.num_clients)]
            out = Federation(ds, fed, global_spec, models, np.asarray(meta["counts"]), ratios)
            _federation_cache[key] = out
            return out

    global_init = build_model(global_spec, seed)
    models, rows = [], []
    for i, ratio in enumerate(ratios):
        spec = extract_submodel(global_spec, ratio)
        model = build_model(spec, seed * 1000 + i + 1)
        if cfg.shared_init:
            model.load_state_dict(slice_state(global_init.state_dict(), model))
        x, y = client_slice(ds, fed, i)
        ccfg = dataclasses.replace(cfg.client, seed=seed * 1000 + i)
        model, counts = client_update(model, x, y, ccfg, ds.num_classes, client_id=i)
        models.append(model)
        rows.append(counts)
    out = Federation(ds, fed, global_spec, models, np.stack(rows), ratios)
    if cache_dir is not None:
        _save_client_cache(out, cache_dir, key)
    _federation_cache[key] = out
    return out


def run_seed(cfg: ExperimentConfig, seed: int, run_dir: str | Path) -> RunRecord:
    """Partition, train clients and run the server for one seed; writes everything under ``run_dir``."""
    if cfg.deterministic:
        torch.set_num_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    fed = train_clients(cfg, seed)
    fed.partition.save(run_dir / "partition.json")
    teachers = [copy.deepcopy(m) for m in fed.local_models]
    tables = compute_weights(fed.label_counts)
    scfg = dataclasses.replace(cfg.server, seed=seed)
    student, record, gens = run_server(teachers, scfg, tables, fed.global_spec,
                                       (fed.dataset.test_x, fed.dataset.test_y), run_dir / "metrics.jsonl")
    record.extra.update({
        "seed": seed,
        "partition_seed_offset": fed.partition.seed_offset,
        "client_sizes": fed.partition.sizes(),
        "width_ratios": list(fed.ratios),
        "label_counts": fed.label_counts.tolist(),
        "label_probs": tables.label_probs.tolist(),
        "experiment": json.loads(cfg.model_dump_json()),
    })
    save_checkpoint(student, run_dir / "student.npz")
    for k, g in enumerate(gens, start=1):
        save_checkpoint(g, run_dir / f"G{k}.npz")
    (run_dir / "record.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return record


def run_seeds(cfg: ExperimentConfig, out_dir: str | Path) -> list[SeedOutcome]:
    outcomes = []
    for seed in cfg.seeds:
        run_dir = Path(out_dir) / f"seed{seed}"
        try:
            outcomes.append(SeedOutcome(seed, run_seed(cfg, seed, run_dir), run_dir))
        except Exception as exc:  # a failing seed must not take the others down
            log.error("seed %d failed: %s", seed, exc)
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "failure.json").write_text(json.dumps(
                {"seed": seed, "error": repr(exc), "traceback": traceback.format_exc()}, indent=2) + "\n")
            outcomes.append(SeedOutcome(seed, None, run_dir, repr(exc)))
    return outcomes


def _row(key: str, outcomes: Iterable[SeedOutcome]) -> ResultRow:
    outcomes = list(outcomes)
    return ResultRow(key, [o.record.best_acc for o in outcomes if o.ok],
                     failed=sum(not o.ok for o in outcomes))


@dataclass
class ExperimentResult:
    table: ResultTable
    outcomes: dict[str, list[SeedOutcome]]

    @property
    def all_ok(self) -> bool:
        return all(o.ok for group in self.outcomes.values() for o in group)


def run_experiment(cfg: ExperimentConfig, name: str | None = None) -> ExperimentResult:
    name = name or cfg.mode.lower()
    out = Path(cfg.output_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    outcomes = run_seeds(cfg, out)
    table = ResultTable(f"{cfg.dataset} N={cfg.num_clients} omega={cfg.omega} rho={cfg.rho}",
                        [_row(cfg.mode, outcomes)])
    table.save(out)
    return ExperimentResult(table, {cfg.mode: outcomes})


def _run_variants(cfg: ExperimentConfig, variants: list[tuple[str, ExperimentConfig]], title: str,
                  name: str) -> ExperimentResult:
    out = Path(cfg.output_dir) / name
    table = ResultTable(title)
    outcomes = {}
    for key, vcfg in variants:
        slug = key.replace(" ", "").replace(",", "_").replace("=", "").replace("-", "no_")
        vdir = out / slug
        vdir.mkdir(parents=True, exist_ok=True)
        vcfg.save(vdir / "config.json")
        outcomes[key] = run_seeds(vcfg, vdir)
        table.rows.append(_row(key, outcomes[key]))
    table.save(out)
    return ExperimentResult(table, outcomes)


def compare_modes(cfg: ExperimentConfig, modes: Iterable[str], name: str = "compare") -> ExperimentResult:
    """One row per mode; clients (and thus partitions) are trained once per seed and shared."""
    modes = list(modes)
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    variants = [(m, cfg.with_updates(**{"server.mode": m})) for m in modes]
    title = f"Top G.acc on {cfg.dataset}, N={cfg.num_clients}, omega={cfg.omega}, rho={cfg.rho}"
    return _run_variants(cfg, variants, title, name)


def sweep(cfg: ExperimentConfig, key: str, values: Iterable, modes: Iterable[str] | None = None,
          name: str = "sweep") -> ExperimentResult:
    """Grid over one config key (e.g. ``omega`` or ``rho``) for each mode."""
    modes = list(modes) if modes is not None else [cfg.mode]
    variants = [(f"{m} {key}={v}", cfg.with_updates(**{key: v, "server.mode": m})) for m in modes for v in values]
    return _run_variants(cfg, variants, f"Top G.acc sweep over {key}", name)


def ablation_variants(cfg: ExperimentConfig, knob: str, values: Iterable | None = None) -> list[tuple[str, ExperimentConfig]]:
    if knob not in ABLATION_KNOBS:
        raise ValueError(f"unknown ablation knob {knob!r}; choose from {ABLATION_KNOBS}")
    s = cfg.server
    base = ("baseline", cfg)
    if knob in ("drop_tran", "drop_div", "drop_cd"):
        term = knob.split("_")[1]
        return [base, (f"-L_{term}", cfg.with_updates(**{f"server.beta_{term}": 0.0}))]
    if knob == "components":
        rows = [base]
        for dropped in (("tran",), ("div",), ("cd",), ("tran", "div"), ("tran", "cd"), ("div", "cd"),
                        ("tran", "div", "cd")):
            rows.append((", ".join(f"-L_{t}" for t in dropped),
                         cfg.with_updates(**{f"server.beta_{t}": 0.0 for t in dropped})))
        return rows
    if knob == "merge_operator":
        merges = list(values) if values is not None else ["MUL", "ADD", "CAT", "NCAT", "NONE"]
        return [(f"({m.lower()}, {s.resolved_variant})", cfg.with_updates(**{"server.merge": m.upper()})) for m in merges]
    if knob == "variant":
        variants = list(values) if values is not None else ["DIAMOND", "TRIANGLE_DOWN", "TRIANGLE_UP"]
        return [(f"({s.merge.lower()}, {v})", cfg.with_updates(**{"server.variant": v})) for v in variants]
    grid = list(values) if values is not None else list(BETA_GRID)
    return [(f"beta_{t}={b}", cfg.with_updates(**{f"server.beta_{t}": b})) for t in ("tran", "div", "cd") for b in grid]


def ablate(cfg: ExperimentConfig, knob: str, values: Iterable | None = None, name: str | None = None) -> ExperimentResult:
    variants = ablation_variants(cfg, knob, values)
    return _run_variants(cfg, variants, f"Ablation ({knob}) on {cfg.dataset}", name or f"ablate_{knob}")


def load_records(root: str | Path) -> list[tuple[Path, dict]]:
    """Every ``record.json`` below ``root`` as (run directory, parsed record)."""
    return [(p.parent, json.loads(p.read_text())) for p in sorted(Path(root).rglob("record.json"))]
