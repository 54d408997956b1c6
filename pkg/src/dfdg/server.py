"""Server side of one-shot FL: aggregation, generator training and distillation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .client import evaluate
from .losses import DIV_DISTANCES, GenLossWeights, VARIANTS, WeightingTables, distillation_loss, ensemble_logits, generator_objective
from .models import ConditionalGenerator, ModelSpec, average_states, build_generator, build_model

log = logging.getLogger(__name__)

MODES = ("DFDG", "DFAD", "DENSE_STYLE", "FEDFTG_STYLE", "FEDAVG_ONLY")
# (number of generators, default transferability gate)
MODE_LAYOUT = {
    "DFDG": (2, "DIAMOND"),
    "DFAD": (1, "DIAMOND"),
    "DENSE_STYLE": (1, "TRIANGLE_DOWN"),
    "FEDFTG_STYLE": (1, "TRIANGLE_UP"),
    "FEDAVG_ONLY": (0, None),
}


class ServerDiverged(RuntimeError):
    pass


@dataclass
class ServerConfig:
    outer_iters: int = 100
    gen_inner_iters: int = 20
    distill_inner_iters: int = 2
    gen_lr: float = 0.0002
    b1: float = 0.5
    b2: float = 0.999
    distill_lr: float = 0.01
    batch_size: int = 64
    noise_dim: int = 100
    merge: str = "MUL"
    generator_widths: list[int] | None = None
    beta_tran: float = 1.0
    beta_div: float = 1.0
    beta_cd: float = 1.0
    mode: str = "DFDG"
    variant: str | None = None
    adam_bias_mode: str = "literal"
    kl_order: str = "as_written"
    div_distance: str = "l2"
    resample_per_inner_step: bool = False
    distill_bn_mode: str = "train"
    eval_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown transfer variant {self.variant!r}")
        if self.distill_bn_mode not in ("train", "eval"):
            raise ValueError("distill_bn_mode must be 'train' or 'eval'")
        if self.adam_bias_mode not in ("literal", "standard"):
            raise ValueError("adam_bias_mode must be 'literal' or 'standard'")
        if self.div_distance not in DIV_DISTANCES:
            raise ValueError(f"div_distance must be one of {DIV_DISTANCES}")
        if min(self.outer_iters, self.gen_inner_iters, self.distill_inner_iters) < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")

    @property
    def num_generators(self) -> int:
        return MODE_LAYOUT[self.mode][0]

    @property
    def resolved_variant(self) -> str | None:
        return self.variant or MODE_LAYOUT[self.mode][1]

    @property
    def loss_weights(self) -> GenLossWeights:
        cd = self.beta_cd if self.num_generators == 2 else 0.0
        return GenLossWeights(self.beta_tran, self.beta_div, cd)


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@dataclass
class RunRecord:
    mode: str
    config: dict
    averaged: bool
    initial_acc: float | None = None
    evaluations: list[dict] = field(default_factory=list)
    best_acc: float | None = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------

def one_shot_aggregate(local_models: Sequence[nn.Module], global_spec: ModelSpec, seed: int = 0) -> tuple[nn.Module, bool]:
    """Average the clients when every model has the global architecture, otherwise start fresh."""
    if not local_models:
        raise ValueError("no local models to aggregate")
    model = build_model(global_spec, seed)
    if all(m.spec == global_spec for m in local_models):
        model.load_state_dict(average_states([m.state_dict() for m in local_models]))
        return model, True
    return model, False


def sample_noise_labels(batch_size: int, noise_dim: int, tables: WeightingTables,
                        rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    z = torch.randn(batch_size, noise_dim, generator=rng)
    probs = torch.as_tensor(tables.label_probs, dtype=torch.float64)
    y = torch.multinomial(probs, batch_size, replacement=True, generator=rng)
    return z, y


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState,
              lr: float, b1: float, b2: float, bias_mode: str = "literal", eps: float = 1e-8) -> None:
    """One Adam update. ``literal`` divides by the constants (1 - b1), (1 - b2) at every step
    instead of the usual (1 - b1**t), (1 - b2**t)."""
    state.step += 1
    if bias_mode == "literal":
        c1, c2 = 1 - b1, 1 - b2
    else:
        c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = torch.zeros_like(p)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def generator_update(gen: ConditionalGenerator, z: torch.Tensor, y: torch.Tensor, student: nn.Module,
                     teachers: Sequence[nn.Module], tables: WeightingTables, cfg: ServerConfig,
                     other: ConditionalGenerator | None = None, gen_id: int = 1,
                     rng: torch.Generator | None = None, trace: list | None = None) -> ConditionalGenerator:
    """Run ``cfg.gen_inner_iters`` Adam steps on one generator with moments reset to zero.

    ``other`` is the partner generator in dual mode; its samples on the same
    (z, y) are held constant for the cross-divergence term.
    """
    params = list(gen.parameters())
    state = AdamState.zeros_like(params)
    tau = tables.tau_tensor()
    weights = cfg.loss_weights
    student_mode = student.training
    student.eval()
    gen.train()
    s_other = None
    for step in range(cfg.gen_inner_iters):
        if cfg.resample_per_inner_step and rng is not None and step > 0:
            z, y = sample_noise_labels(len(y), z.shape[1], tables, rng)
            s_other = None
        if other is not None and weights.cd and s_other is None:
            with torch.no_grad():
                s_other = other(z, y)
        loss, parts = generator_objective(gen, z, y, student, teachers, tau, weights,
                                          cfg.resolved_variant, s_other, cfg.div_distance)
        if not torch.isfinite(loss):
            raise ServerDiverged(f"generator G{gen_id}: non-finite loss at inner step {step}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        adam_step(params, grads, state, cfg.gen_lr, cfg.b1, cfg.b2, cfg.adam_bias_mode)
        if trace is not None:
            trace.append(parts)
    student.train(student_mode)
    return gen


def distill_update(student: nn.Module, gens: Sequence[ConditionalGenerator], teachers: Sequence[nn.Module],
                   tables: WeightingTables, cfg: ServerConfig, z: torch.Tensor, y: torch.Tensor,
                   rng: torch.Generator | None = None) -> tuple[nn.Module, float]:
    """``cfg.distill_inner_iters`` SGD steps pulling the student toward the ensemble on synthetic data."""
    tau = tables.tau_tensor()
    opt = torch.optim.SGD(student.parameters(), lr=cfg.distill_lr, momentum=0.0)
    # "eval" keeps the aggregated BatchNorm statistics instead of refitting them to synthetic batches
    student.train(cfg.distill_bn_mode == "train")
    loss_value = 0.0
    for step in range(cfg.distill_inner_iters):
        if cfg.resample_per_inner_step and rng is not None and step > 0:
            z, y = sample_noise_labels(len(y), z.shape[1], tables, rng)
        with torch.no_grad():
            batches = [g(z, y) for g in gens]
            teacher_out = [ensemble_logits(s, y, teachers, tau) for s in batches]
        loss = distillation_loss([student(s) for s in batches], teacher_out, cfg.kl_order)
        if not torch.isfinite(loss):
            raise ServerDiverged(f"distillation: non-finite loss at inner step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        loss_value = loss.item()
    return student, loss_value


def run_server(teachers: Sequence[nn.Module], cfg: ServerConfig, tables: WeightingTables, global_spec: ModelSpec,
               test_set: tuple[torch.Tensor, torch.Tensor] | None = None, metrics_path: str | Path | None = None,
               on_eval: Callable[[dict], None] | None = None) -> tuple[nn.Module, RunRecord, list[ConditionalGenerator]]:
    """Aggregate the clients, then alternate G1, G2 and student updates for ``cfg.outer_iters`` rounds.

    Evaluations every ``cfg.eval_every`` rounds (and after the last) are
    appended to ``metrics_path`` as JSON lines; the record keeps the best
    accuracy seen.
    """
    t0 = time.perf_counter()
    student, averaged = one_shot_aggregate(teachers, global_spec, seed=cfg.seed)
    record = RunRecord(cfg.mode, asdict(cfg), averaged)
    for t in teachers:
        t.eval()
        t.requires_grad_(False)
    if metrics_path is not None:
        Path(metrics_path).write_text("")

    def emit(entry: dict):
        record.evaluations.append(entry)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_eval is not None:
            on_eval(entry)

    if test_set is not None:
        record.initial_acc = evaluate(student, *test_set)
    gens: list[ConditionalGenerator] = []
    if cfg.mode == "FEDAVG_ONLY" or cfg.outer_iters == 0:
        if test_set is not None:
            record.best_acc = record.initial_acc
            emit({"iter": 0, "acc": record.initial_acc, "best": record.best_acc})
        record.wall_time = time.perf_counter() - t0
        return student, record, gens

    image_shape = global_spec.input_shape
    gens = [build_generator(image_shape, global_spec.num_classes, cfg.noise_dim, cfg.merge,
                            seed=cfg.seed + k, widths=cfg.generator_widths)
            for k in range(cfg.num_generators)]
    rng = torch.Generator().manual_seed(cfg.seed)
    best = None
    for it in range(cfg.outer_iters):
        z, y = sample_noise_labels(cfg.batch_size, cfg.noise_dim, tables, rng)
        student.requires_grad_(False)
        trace: list[dict] = []
        for k, gen in enumerate(gens):
            other = gens[1 - k] if len(gens) == 2 else None
            generator_update(gen, z, y, student, teachers, tables, cfg, other, gen_id=k + 1, rng=rng, trace=trace)
        student.requires_grad_(True)
        student, dmd = distill_update(student, gens, teachers, tables, cfg, z, y, rng)
        if test_set is not None and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.outer_iters):
            acc = evaluate(student, *test_set)
            best = acc if best is None else max(best, acc)
            entry = {"iter": it + 1, "acc": acc, "best": best, "loss_dmd": dmd}
            if trace:
                entry["loss_gen"] = {k: float(np.mean([p[k] for p in trace if k in p]))
                                     for k in trace[-1]}
            emit(entry)
            log.debug("iter %d acc %.4f best %.4f", it + 1, acc, best)
    record.best_acc = best
    record.wall_time = time.perf_counter() - t0
    return student, record, gens
