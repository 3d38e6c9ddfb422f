"""Per-epoch noise-type triage.

Stage one fits a two-component 1-D Gaussian mixture to per-sample losses and
keeps samples whose posterior under the low-mean component exceeds
``gamma_cl`` as clean. Stage two scores the remaining samples by the
distance to their k-th nearest clean neighbour on the unit sphere and marks
those at or below an ID-retention threshold as open-set.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._random import stream_rng

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gmm2:
    means: np.ndarray
    variances: np.ndarray
    mix_weights: np.ndarray
    degenerate: bool = False
    log_likelihood: list = field(default_factory=list)
    n_iter: int = 0


@dataclass
class Partition:
    clean: np.ndarray
    closed_noisy: np.ndarray
    open_noisy: np.ndarray

    @property
    def size(self):
        return len(self.clean) + len(self.closed_noisy) + len(self.open_noisy)

    def labels(self, n=None):
        """Per-index noise type codes (0 clean, 1 closed, 2 open)."""
        out = np.full(self.size if n is None else n, -1, dtype=np.int64)
        out[self.clean] = 0
        out[self.closed_noisy] = 1
        out[self.open_noisy] = 2
        return out

    @classmethod
    def all_clean(cls, n):
        return cls(np.arange(n), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels)
        return cls(*(np.flatnonzero(labels == t) for t in (0, 1, 2)))


def _component_log_density(x, means, variances):
    x = x[:, None]
    return -0.5 * (_LOG_2PI + np.log(variances) + (x - means) ** 2 / variances)


def _log_joint(x, means, variances, weights):
    with np.errstate(divide="ignore"):
        return _component_log_density(x, means, variances) + np.log(weights)


def _em(x, means, variances, weights, max_iter, tol, var_floor):
    history = []
    for it in range(max_iter):
        lj = _log_joint(x, means, variances, weights)
        ll_i = np.logaddexp(lj[:, 0], lj[:, 1])
        ll = float(ll_i.sum())
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise RuntimeError(f"EM log-likelihood decreased: {history[-1]} -> {ll}")
        history.append(ll)
        if len(history) > 1 and ll - history[-2] <= tol * max(1.0, abs(ll)):
            break
        resp = np.exp(lj - ll_i[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 1e-12):
            break
        weights = nk / len(x)
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, var_floor)
    return means, variances, weights, history


def _seed_pair(x, rng):
    """k-means++ style seeding of two centers on scalar data."""
    first = x[rng.integers(len(x))]
    d2 = (x - first) ** 2
    if d2.sum() == 0:
        return np.array([first, first])
    second = x[rng.choice(len(x), p=d2 / d2.sum())]
    return np.array([first, second])


def fit_gmm_em(losses, max_iter=100, tol=1e-8, n_init=10, seed=0, var_floor=VAR_FLOOR):
    """Fit a two-component 1-D Gaussian mixture by EM.

    The input is sorted before seeding, so the fit does not depend on sample
    order. Of ``n_init`` seeded restarts the best final likelihood is kept.
    Component 0 is always the lower-mean one. Constant input produces a
    ``degenerate`` fit whose posteriors are all 0.5.
    """
    x = np.sort(np.asarray(losses, dtype=np.float64).ravel())
    if len(x) < 2:
        raise ValueError("fit_gmm_em needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("fit_gmm_em got non-finite losses")
    spread = x[-1] - x[0]
    if spread <= 1e-12 * max(1.0, abs(x[0])):
        m = float(x.mean())
        return Gmm2(np.array([m, m]), np.full(2, var_floor), np.array([0.5, 0.5]), degenerate=True)

    rng = stream_rng(seed, "gmm")
    best = None
    overall_var = max(float(x.var()), var_floor)
    for _ in range(n_init):
        means = np.sort(_seed_pair(x, rng))
        if means[0] == means[1]:
            means = np.array([x[0], x[-1]])
        variances = np.full(2, max(overall_var / 4.0, var_floor))
        fit = _em(x, means, variances, np.array([0.5, 0.5]), max_iter, tol, var_floor)
        if best is None or fit[3][-1] > best[3][-1]:
            best = fit
    means, variances, weights, history = best
    order = np.argsort(means, kind="stable")
    return Gmm2(means[order], variances[order], weights[order], log_likelihood=history, n_iter=len(history))


def posterior_clean(gmm, loss):
    """Posterior probability of the low-mean component.

    Beyond the high-mean component's center the posterior is capped at its
    value there, so a very large loss can never look cleaner than a typical
    noisy one (with unequal variances the raw Bayes posterior can turn back
    up in the tail).
    """
    loss = np.asarray(loss, dtype=np.float64)
    scalar = loss.ndim == 0
    x = np.atleast_1d(loss)
    if gmm.degenerate:
        out = np.full(x.shape, 0.5)
    else:
        out = _raw_posterior(gmm, x)
        hi = x > gmm.means[1]
        if np.any(hi):
            cap = _raw_posterior(gmm, np.array([gmm.means[1]]))[0]
            out[hi] = np.minimum(out[hi], cap)
    return float(out[0]) if scalar else out


def _raw_posterior(gmm, x):
    lj = _log_joint(x, gmm.means, gmm.variances, gmm.mix_weights)
    return np.exp(lj[:, 0] - np.logaddexp(lj[:, 0], lj[:, 1]))


def partition_clean(losses, gmm, gamma_cl):
    """Split indices into ``(clean, noisy)`` by ``posterior > gamma_cl``."""
    post = posterior_clean(gmm, np.asarray(losses, dtype=np.float64))
    clean = post > gamma_cl
    return np.flatnonzero(clean), np.flatnonzero(~clean)


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def effective_k(k, n_clean, desk_scale=True):
    """k actually used for a clean bank of ``n_clean`` features."""
    if desk_scale:
        k = min(k, max(1, math.ceil(n_clean / 10)))
    if k > n_clean:
        logger.warning("k=%d exceeds the %d available clean features; clamping", k, n_clean)
        k = n_clean
    return max(int(k), 1)


def knn_ood_scores(features, clean_features, k, exclude_self=None):
    """Negative distance to the k-th nearest clean feature after L2 normalization.

    ``exclude_self[i]``, when given, is the row of ``clean_features`` that is
    sample ``i`` itself (or -1); that row is skipped as a neighbour.
    """
    q = l2_normalize(np.atleast_2d(features))
    bank = l2_normalize(np.atleast_2d(clean_features))
    avail = len(bank) - (0 if exclude_self is None else 1)
    if k > avail:
        logger.warning("k=%d exceeds the %d available clean features; clamping", k, avail)
        k = avail
    if k < 1:
        raise ValueError("knn_ood_scores needs at least one clean reference feature")
    # direct differences rather than the dot-product expansion: exact zeros stay zero
    chunk = max(1, 4_000_000 // max(1, bank.size))
    kth = np.empty(len(q))
    for start in range(0, len(q), chunk):
        stop = min(start + chunk, len(q))
        d = np.linalg.norm(q[start:stop, None, :] - bank[None], axis=-1)
        if exclude_self is not None:
            ex = np.asarray(exclude_self)[start:stop]
            rows = np.flatnonzero(ex >= 0)
            d[rows, ex[rows]] = np.inf
        kth[start:stop] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return -kth


def knn_ood_score(f, clean_features, k):
    """Score of a single feature vector (``<= 0``; 0 means on top of a clean feature)."""
    return float(knn_ood_scores(np.asarray(f)[None], clean_features, k)[0])


def select_ood_threshold(clean_scores, gamma_ood):
    """Raw score threshold that keeps ``ceil(gamma_ood * n)`` clean scores strictly above it.

    ``gamma_ood`` is the ID retention fraction; with ``gamma_ood = 1`` the
    threshold is the minimum clean score.
    """
    s = np.sort(np.asarray(clean_scores, dtype=np.float64))
    if len(s) == 0:
        raise ValueError("select_ood_threshold needs at least one clean score")
    keep = min(len(s), math.ceil(gamma_ood * len(s) - 1e-9))
    below = len(s) - keep
    return float(s[max(below - 1, 0)])


def partition_open_set(noisy_indices, scores, threshold):
    """Split noisy indices into ``(open, closed)``; ``score <= threshold`` is open-set."""
    noisy_indices = np.asarray(noisy_indices, dtype=np.int64)
    is_open = np.asarray(scores) <= threshold
    return noisy_indices[is_open], noisy_indices[~is_open]


@dataclass
class TriageResult:
    partition: Partition
    posterior: np.ndarray
    ood_score: np.ndarray
    threshold: float
    k: int
    gmm: Gmm2
    fallback: bool = False


def triage(losses, features, gamma_cl, gamma_ood, k=200, detect_open=True, seed=0, desk_k=True,
           var_floor=VAR_FLOOR):
    """Full two-stage triage of one epoch's cached losses and features.

    ``ood_score`` is NaN for samples not scored. If no sample passes as
    clean, every sample is treated as clean for the epoch (flagged via
    ``fallback``) since the KNN stage needs a clean reference set.
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses)
    gmm = fit_gmm_em(losses, seed=seed, var_floor=var_floor)
    post = posterior_clean(gmm, losses)
    clean, noisy = partition_clean(losses, gmm, gamma_cl)
    scores = np.full(n, np.nan)
    if len(clean) == 0:
        logger.warning("triage found no clean samples; treating all %d as clean this epoch", n)
        return TriageResult(Partition.all_clean(n), post, scores, float("nan"), 0, gmm, fallback=True)
    if not detect_open or len(noisy) == 0 or len(clean) < 2:
        return TriageResult(Partition(clean, noisy, np.zeros(0, np.int64)), post, scores,
                            float("nan"), 0, gmm)
    kk = min(effective_k(k, len(clean), desk_scale=desk_k), len(clean) - 1)
    bank = features[clean]
    scores[clean] = knn_ood_scores(bank, bank, kk, exclude_self=np.arange(len(clean)))
    scores[noisy] = knn_ood_scores(features[noisy], bank, kk)
    thr = select_ood_threshold(scores[clean], gamma_ood)
    open_idx, closed_idx = partition_open_set(noisy, scores[noisy], thr)
    return TriageResult(Partition(clean, closed_idx, open_idx), post, scores, thr, kk, gmm)
