"""The three loss families driving local representation learning.

* classification: mean negative log likelihood over a batch,
* domain confusion: binary NLL of a domain classifier applied to client
  features (label 0) and target features (label 1), with analytic gradients
  for the classifier itself and for both feature sets,
* multi-kernel squared MMD between two feature sets (five Gaussian kernels,
  bandwidths spaced by factors of two around a median-distance center),

plus the sigmoid ramp coefficient that gates the alignment terms as
training progresses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .nn import ModelParams, ParamGrads, backward, forward

# Bandwidth ladder around the median-distance center kernel; each step
# doubles the previous bandwidth.
BANK_SPREAD = (0.25, 0.5, 1.0, 2.0, 4.0)
MIN_BANDWIDTH = 1e-6

# Domain labels carried on feature batches during the confusion loss.
DOMAIN_CLIENT = 0
DOMAIN_TARGET = 1


def nll_loss(log_probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean NLL of integer labels under row-wise log-probabilities.

    Returns the scalar loss and its gradient w.r.t. the log-probabilities.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    y = np.asarray(labels)
    n, c = lp.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch of {n}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    rows = np.arange(n)
    loss = -lp[rows, y].mean()
    grad = np.zeros_like(lp)
    grad[rows, y] = -1.0 / n
    return float(loss), grad


@dataclass(frozen=True)
class KernelBank:
    """Five Gaussian kernel bandwidths, each double the previous."""

    sigmas: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.sigmas) != len(BANK_SPREAD):
            raise ValueError(f"expected {len(BANK_SPREAD)} bandwidths")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("bandwidths must be positive")


def kernel_bank_from(h_a: np.ndarray, h_b: np.ndarray) -> KernelBank:
    """Bandwidth ladder centered on the median pairwise distance of the
    pooled feature set, clamped below at ``MIN_BANDWIDTH``."""
    a, b = _check_feature_pair(h_a, h_b)
    pooled = np.vstack([a, b])
    center = max(float(np.median(pdist(pooled))), MIN_BANDWIDTH)
    return KernelBank(tuple(center * s for s in BANK_SPREAD))


def mk_mmd_sq(
    h_a: np.ndarray, h_b: np.ndarray, bank: KernelBank
) -> tuple[float, np.ndarray]:
    """Squared MMD between two feature sets, averaged over the kernel bank.

    Uses the biased V-statistic (all pairs, diagonal included) with kernels
    k(h, h') = exp(-||h - h'||^2 / (2 sigma^2)); the value is therefore >= 0
    and exactly 0 on identical sets. Also returns the analytic gradient
    w.r.t. the entries of ``h_a`` (the bank is treated as fixed).
    """
    a, b = _check_feature_pair(h_a, h_b)
    n, m = a.shape[0], b.shape[0]
    d_aa = cdist(a, a, "sqeuclidean")
    d_bb = cdist(b, b, "sqeuclidean")
    d_ab = cdist(a, b, "sqeuclidean")
    value = 0.0
    grad = np.zeros_like(a)
    for sigma in bank.sigmas:
        s2 = 2.0 * sigma * sigma
        k_aa = np.exp(-d_aa / s2)
        k_bb = np.exp(-d_bb / s2)
        k_ab = np.exp(-d_ab / s2)
        value += k_aa.sum() / (n * n) + k_bb.sum() / (m * m) - 2.0 * k_ab.sum() / (n * m)
        # d k(u, w) / du = -k(u, w) (u - w) / sigma^2; the a-a double sum hits
        # each row twice (as u and as w), the cross sum once with weight -2/(nm).
        rs_aa = k_aa.sum(axis=1, keepdims=True)
        rs_ab = k_ab.sum(axis=1, keepdims=True)
        grad += (-2.0 / (n * n * sigma * sigma)) * (rs_aa * a - k_aa @ a)
        grad += (2.0 / (n * m * sigma * sigma)) * (rs_ab * a - k_ab @ b)
    r = len(bank.sigmas)
    return float(value) / r, grad / r


def disentangler_loss(
    h_client: np.ndarray,
    h_target: np.ndarray,
    f_d: ModelParams,
    mode: str = "train",
) -> tuple[float, ParamGrads, np.ndarray, np.ndarray]:
    """Binary domain-confusion loss of the domain classifier ``f_d``.

    Client features carry label 0 and target features label 1; each NLL term
    is mean-reduced over its own batch, so the value is invariant to batch
    sizes and to swapping the two sets together with their labels.

    Returns ``(loss, grads_f_d, grad_h_client, grad_h_target)``. The domain
    classifier descends its gradient; the encoders ascend the feature
    gradients (the caller applies the reversal sign). Train mode updates the
    classifier's batch-norm running statistics, one batch per term.
    """
    hc = np.asarray(h_client, dtype=np.float64)
    ht = np.asarray(h_target, dtype=np.float64)
    if hc.ndim != 2 or ht.ndim != 2 or hc.shape[1] != ht.shape[1]:
        raise ValueError("feature sets must be 2-d with equal width")
    lp_c, tape_c = forward(f_d, hc, mode)
    j_c, g_c = nll_loss(lp_c, np.full(hc.shape[0], DOMAIN_CLIENT))
    grads_c, gh_c = backward(f_d, tape_c, g_c)
    lp_t, tape_t = forward(f_d, ht, mode)
    j_t, g_t = nll_loss(lp_t, np.full(ht.shape[0], DOMAIN_TARGET))
    grads_t, gh_t = backward(f_d, tape_t, g_t)
    grads = {k: grads_c[k] + grads_t[k] for k in grads_c}
    return j_c + j_t, grads, gh_c, gh_t


@dataclass(frozen=True)
class ScheduleClock:
    """Training-progress coordinates for the alignment ramp."""

    batch: int
    batches_per_round: int
    round: int
    total_rounds: int
    gamma: float = 5.0

    def __post_init__(self) -> None:
        if not 0 <= self.batch < self.batches_per_round:
            raise ValueError("batch index out of range")
        if not 0 <= self.round < self.total_rounds:
            raise ValueError("round index out of range")

    @property
    def progress(self) -> float:
        return (self.batch + self.round * self.batches_per_round) / (
            self.total_rounds * self.batches_per_round
        )


def ramp(progress: float, gamma: float = 5.0) -> float:
    """Sigmoid ramp 2/(1+exp(-gamma*p)) - 1: exactly 0 at p=0, -> 1 as p -> inf."""
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


def lambda_schedule(clock: ScheduleClock) -> float:
    """Alignment coefficient at the clock's progress; non-decreasing in
    lexicographic (round, batch) order and bounded in [0, 1)."""
    return ramp(clock.progress, clock.gamma)


def combined_local_objective(
    j_cls: float, j_dis: float, j_mmd: float, lam: float
) -> float:
    """Scalar local objective: classification minus the gated confusion term
    plus the gated embedding-matching term (the encoder ascends the former
    and descends the latter)."""
    total = j_cls - lam * j_dis + lam * j_mmd
    if not math.isfinite(total):
        raise ValueError("non-finite objective")
    return total


def _check_feature_pair(h_a: np.ndarray, h_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(h_a, dtype=np.float64)
    b = np.asarray(h_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature sets must be 2-d (rows = samples)")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("feature sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    return a, b
