"""Generator and distillation objectives over ensembles of client classifiers.

Loss functions take logits rather than models so that one forward pass per
network can feed several terms.  ``ensemble_logits`` is the only function
here that runs the client models.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("DIAMOND", "TRIANGLE_UP", "TRIANGLE_DOWN")
KL_ORDERS = ("as_written", "teacher_first")
DIV_DISTANCES = ("l2", "mean_sq")


@dataclass
class WeightingTables:
    tau: np.ndarray          # N x C, client weight per label
    label_probs: np.ndarray  # C, label sampling distribution

    def tau_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.tau, dtype=torch.float32)


@dataclass
class GenLossWeights:
    tran: float = 1.0
    div: float = 1.0
    cd: float = 1.0


def compute_weights(counts) -> WeightingTables:
    """tau[i, y] = n_i^y / n^y and p(y) = n^y / sum n^y, zero for unseen labels."""
    lc = np.asarray(counts, dtype=np.float64)
    if lc.ndim != 2:
        raise ValueError("label counter must be an N x C matrix")
    if (lc < 0).any():
        raise ValueError("label counter has negative entries")
    per_class = lc.sum(0)
    total = per_class.sum()
    if total == 0:
        raise ValueError("label counter is all zero; no client saw any data")
    tau = np.divide(lc, per_class, out=np.zeros_like(lc), where=per_class > 0)
    return WeightingTables(tau, per_class / total)


def ensemble_logits(s: torch.Tensor, y: torch.Tensor, teachers: Sequence[nn.Module],
                    tau: torch.Tensor) -> torch.Tensor:
    """sum_i tau[i, y_b] * f_i(s_b) for every sample b.

    Teachers are summed in list order so the reduction is reproducible.
    """
    w = tau[:, y]  # N x B
    if (w.sum(0) == 0).any():
        bad = sorted(set(y[w.sum(0) == 0].tolist()))
        raise ValueError(f"no client holds label(s) {bad}; cannot form ensemble logits")
    out = None
    for i, f in enumerate(teachers):
        term = w[i].unsqueeze(1) * f(s)
        out = term if out is None else out + term
    return out


def kl_from_logits(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(softmax(p) || softmax(q))."""
    log_p = F.log_softmax(p_logits, dim=1)
    log_q = F.log_softmax(q_logits, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1)


def fidelity_loss(ens: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(ens, y)


@torch.no_grad()
def transfer_gate(student_logits: torch.Tensor, ens: torch.Tensor, y: torch.Tensor,
                  variant: str = "DIAMOND") -> torch.Tensor:
    """Per-sample 0/1 mask selecting which samples the transferability term sees."""
    s_pred = student_logits.argmax(1)
    t_pred = ens.argmax(1)
    if variant == "DIAMOND":
        gate = (s_pred != y) & (t_pred == y)
    elif variant == "TRIANGLE_DOWN":
        gate = s_pred != t_pred
    elif variant == "TRIANGLE_UP":
        gate = torch.ones_like(y, dtype=torch.bool)
    else:
        raise ValueError(f"unknown transfer variant {variant!r}")
    return gate.to(ens.dtype)


def transferability_loss(ens: torch.Tensor, student_logits: torch.Tensor, y: torch.Tensor,
                         variant: str = "DIAMOND") -> torch.Tensor:
    eps = transfer_gate(student_logits, ens, y, variant)
    return -(eps * kl_from_logits(ens, student_logits)).mean()


def _pairwise_dist(x: torch.Tensor) -> torch.Tensor:
    x = x.reshape(x.shape[0], -1)
    sq = ((x.unsqueeze(1) - x.unsqueeze(0)) ** 2).sum(-1)
    # sqrt has an infinite slope at 0 (always hit on the diagonal)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _pairwise_mean_sq(x: torch.Tensor) -> torch.Tensor:
    x = x.reshape(x.shape[0], -1)
    return ((x.unsqueeze(1) - x.unsqueeze(0)) ** 2).mean(-1)


def diversity_loss(s: torch.Tensor, h: torch.Tensor, distance: str = "l2") -> torch.Tensor:
    """exp(-mean over all ordered pairs (j, l) of |s_j - s_l| * |h_j - h_l|).

    ``mean_sq`` replaces both norms by the per-dimension mean squared difference,
    which keeps the exponent O(1) for image-sized samples.
    """
    if distance not in DIV_DISTANCES:
        raise ValueError(f"distance must be one of {DIV_DISTANCES}")
    dist = _pairwise_dist if distance == "l2" else _pairwise_mean_sq
    b = s.shape[0]
    return torch.exp(-(dist(s) * dist(h)).sum() / b**2)


def cross_divergence_loss(ens_k: torch.Tensor, ens_other: torch.Tensor) -> torch.Tensor:
    """-KL between the ensemble's answers on this generator's and the other generator's batch.

    ``ens_other`` is detached: the other generator is not trained by this term.
    """
    return -kl_from_logits(ens_k, ens_other.detach()).mean()


def generator_objective(gen, z: torch.Tensor, y: torch.Tensor, student: nn.Module,
                        teachers: Sequence[nn.Module], tau: torch.Tensor,
                        weights: GenLossWeights, variant: str = "DIAMOND",
                        s_other: torch.Tensor | None = None,
                        div_distance: str = "l2") -> tuple[torch.Tensor, dict[str, float]]:
    """Fidelity + weighted transferability, diversity and cross-divergence for one generator.

    ``s_other`` is the other generator's batch for the same (z, y); pass None
    (or a zero ``weights.cd``) to drop the cross-divergence term.
    """
    h = gen.merge(z, y)
    s = gen.decode(h)
    ens = ensemble_logits(s, y, teachers, tau)
    l_fid = fidelity_loss(ens, y)
    total = l_fid
    parts = {"fid": l_fid.item()}
    if weights.tran:
        l_tran = transferability_loss(ens, student(s), y, variant)
        total = total + weights.tran * l_tran
        parts["tran"] = l_tran.item()
    if weights.div:
        l_div = diversity_loss(s, h, div_distance)
        total = total + weights.div * l_div
        parts["div"] = l_div.item()
    if weights.cd and s_other is not None:
        with torch.no_grad():
            ens_other = ensemble_logits(s_other, y, teachers, tau)
        l_cd = cross_divergence_loss(ens, ens_other)
        total = total + weights.cd * l_cd
        parts["cd"] = l_cd.item()
    return total, parts


def distillation_loss(student_logits: Sequence[torch.Tensor], ens_logits: Sequence[torch.Tensor],
                      kl_order: str = "as_written") -> torch.Tensor:
    """Sum over generators of the batch-mean KL between student and (constant) ensemble logits.

    ``as_written`` uses KL(student || ensemble); ``teacher_first`` swaps the arguments.
    """
    if kl_order not in KL_ORDERS:
        raise ValueError(f"kl_order must be one of {KL_ORDERS}")
    total = student_logits[0].new_zeros(())
    for st, en in zip(student_logits, ens_logits):
        en = en.detach()
        kl = kl_from_logits(st, en) if kl_order == "as_written" else kl_from_logits(en, st)
        total = total + kl.mean()
    return total
