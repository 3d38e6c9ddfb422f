"""Supervision assembly and the training objective.

The classification loss has three branches (observed labels for clean
samples, weighted soft pseudo-labels for closed-set noisy samples, per-epoch
random "dynamic" labels for open-set noisy samples), each reduced by its
mean. The contrastive term is a supervised contrastive loss over K+1 classes
where detected open-set samples form the extra class and every pair is
weighted by the reliability of both members' refined labels.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from ._random import keyed_integers
from .noise_identifier import fit_gmm_em, posterior_clean

logger = logging.getLogger(__name__)

CLEAN, CLOSED, OPEN = 0, 1, 2
PROB_EPS = 1e-12


def pseudo_label(p_v1, p_v2):
    """Sharpened soft label: the squared mean of two views' predictions, L1-normalized."""
    m = (np.asarray(p_v1, dtype=np.float64) + np.asarray(p_v2, dtype=np.float64)) / 2.0
    sq = m ** 2
    return sq / sq.sum(axis=-1, keepdims=True)


def soft_cross_entropy(target, probs):
    """``-sum_c target_c log p_c`` row-wise (numpy)."""
    return -(np.asarray(target) * np.log(np.maximum(probs, PROB_EPS))).sum(axis=-1)


def pseudo_weights(pseudo_losses, seed=0):
    """Reliability weights: posterior of the low-loss component of a 2-GMM."""
    pseudo_losses = np.asarray(pseudo_losses, dtype=np.float64)
    if len(pseudo_losses) == 0:
        return np.zeros(0)
    if len(pseudo_losses) == 1:
        return np.ones(1)
    return np.asarray(posterior_clean(fit_gmm_em(pseudo_losses, seed=seed), pseudo_losses))


def dynamic_labels(K, epoch, sample_ids, seed):
    """Uniform labels in ``[0, K)``, a pure function of (seed, epoch, id)."""
    return keyed_integers(seed, "dynamic_label", sample_ids, K, epoch)


def dynamic_label(K, epoch, sample_id, seed):
    return int(dynamic_labels(K, epoch, [sample_id], seed)[0])


@dataclass(frozen=True)
class SupervisionRecord:
    refined_label: int
    target: object
    weight: float
    kind: int


@dataclass
class Supervision:
    """Per-sample supervision for one epoch, stored column-wise.

    ``hard`` holds observed labels (clean) or dynamic labels (open-set) and is
    -1 for closed-set samples, whose target is the ``soft`` row instead.
    """

    kind: np.ndarray
    refined: np.ndarray
    hard: np.ndarray
    soft: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.kind)

    def __getitem__(self, i):
        kind = int(self.kind[i])
        target = self.soft[i].copy() if kind == CLOSED else int(self.hard[i])
        return SupervisionRecord(int(self.refined[i]), target, float(self.weight[i]), kind)

    def records(self):
        return [self[i] for i in range(len(self))]

    def tensors(self, index, dtype=torch.float64):
        index = torch.as_tensor(index, dtype=torch.long)
        return (torch.as_tensor(self.kind)[index], torch.as_tensor(self.hard)[index],
                torch.as_tensor(self.soft, dtype=dtype)[index], torch.as_tensor(self.weight, dtype=dtype)[index],
                torch.as_tensor(self.refined)[index])


def refine_labels(partition, observed, pseudo, K, closed_weights=None, dynamic=None):
    """Build per-sample supervision from a triage partition.

    ``pseudo`` is an ``(N, K)`` array whose rows matter only for closed-set
    samples; ``closed_weights`` is aligned with ``partition.closed_noisy``.
    Open-set samples get refined label ``K`` (the extra class).
    """
    observed = np.asarray(observed, dtype=np.int64)
    n = len(observed)
    kind = np.full(n, -1, dtype=np.int64)
    kind[partition.clean] = CLEAN
    kind[partition.closed_noisy] = CLOSED
    kind[partition.open_noisy] = OPEN
    if np.any(kind < 0):
        raise ValueError("partition does not cover every sample")
    pseudo = np.zeros((n, K)) if pseudo is None else np.asarray(pseudo, dtype=np.float64)
    refined = observed.copy()
    hard = observed.copy()
    weight = np.ones(n)
    soft = np.zeros((n, K))
    cn = partition.closed_noisy
    if len(cn):
        soft[cn] = pseudo[cn]
        refined[cn] = pseudo[cn].argmax(axis=1)
        hard[cn] = -1
        weight[cn] = 1.0 if closed_weights is None else closed_weights
    on = partition.open_noisy
    refined[on] = K
    if dynamic is not None:
        hard[on] = np.asarray(dynamic)[on] if len(dynamic) == n else dynamic
    return Supervision(kind, refined, hard, soft, weight)


def classification_loss_branches(probs, kind, hard, soft, weight):
    """Mean-reduced CE per branch; returns ``(clean, closed, open, clamped)``."""
    clamped = bool((probs < PROB_EPS).any())
    logp = torch.log(probs.clamp_min(PROB_EPS))
    zero = probs.new_zeros(())

    def hard_ce(mask):
        if not bool(mask.any()):
            return zero
        return -logp[mask].gather(1, hard[mask][:, None]).squeeze(1).mean()

    cl = hard_ce(kind == CLEAN)
    on = hard_ce(kind == OPEN)
    m = kind == CLOSED
    cn = (weight[m] * -(soft[m] * logp[m]).sum(1)).mean() if bool(m.any()) else zero
    if clamped:
        logger.debug("classification loss clamped a zero probability at eps=%g", PROB_EPS)
    return cl, cn, on, clamped


def classification_loss(probs, kind, hard, soft, weight):
    cl, cn, on, _ = classification_loss_branches(probs, kind, hard, soft, weight)
    return cl + cn + on


def ensc_loss(z, refined, weight, tau=0.2):
    """Weighted supervised contrastive loss over one batch.

    For anchor i with positives P(i) (same refined label, excluding i) and
    contrast set A(i) (batch minus i), the anchor term is

        -1/|P(i)| sum_p log( w_i w_p exp(z_i.z_p/tau) / sum_a w_i w_a exp(z_i.z_a/tau) )

    Zero-weight members are dropped as positives and competitors; anchors
    with no usable positive (or zero weight) are skipped. The result is the
    mean over the remaining anchors, 0 if there are none.
    """
    n = z.shape[0]
    if n < 2:
        return z.new_zeros(()) + 0.0 * z.sum()
    refined = torch.as_tensor(refined)
    weight = torch.as_tensor(weight, dtype=z.dtype)
    usable = weight > 0
    not_self = ~torch.eye(n, dtype=torch.bool)
    competitor = not_self & usable[None, :]
    log_w = torch.log(torch.where(usable, weight, torch.ones_like(weight)))
    logits = z @ z.T / tau + log_w[None, :]
    row_ok = competitor.any(dim=1) & usable
    safe = torch.where(row_ok[:, None], logits.masked_fill(~competitor, float("-inf")),
                       torch.zeros_like(logits))
    log_denom = torch.logsumexp(safe, dim=1, keepdim=True)
    positive = competitor & (refined[:, None] == refined[None, :])
    n_pos = positive.sum(dim=1)
    anchor_ok = row_ok & (n_pos > 0)
    if not bool(anchor_ok.any()):
        return 0.0 * z.sum()
    log_prob = torch.where(positive, logits - log_denom, torch.zeros_like(logits))
    per_anchor = -log_prob.sum(dim=1) / n_pos.clamp_min(1)
    return per_anchor[anchor_ok].mean()


def total_loss(l_cls, l_ensc, lam):
    return l_cls + lam * l_ensc
