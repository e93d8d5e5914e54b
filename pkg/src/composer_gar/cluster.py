"""Prototype clustering across scales: Sinkhorn-Knopp codes and swapped prediction."""
from __future__ import annotations

import itertools
import math
import warnings

import torch
import torch.nn.functional as F


def project_unit_sphere(v: torch.Tensor) -> torch.Tensor:
    """L2-normalize along the last axis; zero rows stay zero."""
    norm = v.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        warnings.warn("projecting a zero vector onto the unit sphere", RuntimeWarning, stacklevel=2)
    return v / torch.where(norm == 0, torch.ones_like(norm), norm)


def marginal_violation(Q: torch.Tensor) -> tuple[float, float]:
    """L1 distance of row sums from 1/B and column sums from 1/K."""
    B, K = Q.shape
    rows = (Q.sum(1) - 1.0 / B).abs().sum().item()
    cols = (Q.sum(0) - 1.0 / K).abs().sum().item()
    return rows, cols


@torch.no_grad()
def sinkhorn(scores: torch.Tensor, eps: float, iters: int, record: bool = False):
    """Equipartition transport plan for a B x K score matrix.

    Each round rescales columns to 1/K and then rows to 1/B. Returns the plan
    (total mass 1); with ``record`` also returns the L1 column-marginal
    violation after every round.

    The rescaling runs on log values so that columns whose exp(score / eps)
    underflows to zero for every row stay finite.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    B, K = scores.shape
    logQ = scores / eps
    logQ = logQ - torch.logsumexp(logQ.flatten(), 0)
    trace = []
    for _ in range(iters):
        logQ = logQ - torch.logsumexp(logQ, 0, keepdim=True) - math.log(K)
        logQ = logQ - torch.logsumexp(logQ, 1, keepdim=True) - math.log(B)
        if record:
            trace.append(marginal_violation(logQ.exp())[1])
    Q = logQ.exp()
    return (Q, trace) if record else Q


def sinkhorn_codes(V: torch.Tensor, C: torch.Tensor, eps: float = 0.05, iters: int = 3) -> torch.Tensor:
    """Soft cluster codes for unit-norm representations ``V`` against prototypes ``C``.

    Rows of the returned B x K matrix are probability distributions; no
    gradient flows through them.
    """
    B = V.shape[0]
    if B < 1 or C.shape[0] < 2:
        raise ValueError("need B >= 1 and K >= 2")
    return sinkhorn(V.detach() @ C.detach().T, eps, iters) * B


def swapped_fit(v: torch.Tensor, q: torch.Tensor, C: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy between codes ``q`` and softmax(v C^T / tau), per row."""
    return -(q * F.log_softmax(v @ C.T / tau, dim=-1)).sum(-1)


def swapped_pair_loss(v_w, v_s, q_w, q_s, C, tau: float) -> torch.Tensor:
    return swapped_fit(v_w, q_s, C, tau) + swapped_fit(v_s, q_w, C, tau)


def cluster_loss(reprs: list[torch.Tensor], C: torch.Tensor, tau: float = 0.1, eps: float = 0.05,
                 iters: int = 3, codes: list[torch.Tensor] | None = None):
    """Swapped-prediction loss summed over unordered scale pairs, averaged over the batch.

    ``reprs`` holds one B x d tensor per scale. Precomputed ``codes`` may be
    passed to hold the assignments fixed (used by the gradient check).
    Returns ``(loss, codes)``.
    """
    if len(reprs) < 2:
        zero = C.sum() * 0.0
        return zero, []
    if reprs[0].shape[0] == 1:
        warnings.warn("cluster loss with batch size 1: equipartition is degenerate",
                      RuntimeWarning, stacklevel=2)
    V = [project_unit_sphere(r) for r in reprs]
    if codes is None:
        codes = [sinkhorn_codes(v, C, eps, iters) for v in V]
    total = 0.0
    for w, s in itertools.combinations(range(len(V)), 2):
        total = total + swapped_pair_loss(V[w], V[s], codes[w], codes[s], C, tau)
    return total.mean(), codes
