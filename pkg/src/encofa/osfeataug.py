"""Feature-level augmentation for detected open-set samples.

Channels whose averaged, min-max normalized gradient importance falls below
``gamma_gen`` are "class-general"; an augmented open-set feature keeps its
own class-specific channels and takes the class-general channels of a random
batchmate.
"""
import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)


def compute_channel_importance(gradients):
    """Mean pooled gradient over samples, min-max normalized to [0, 1].

    A constant mean vector has no defined normalization; all ones is returned
    (every channel class-specific, so augmentation becomes the identity).
    """
    g = np.asarray(gradients, dtype=np.float64)
    mean = g.mean(axis=0) if g.ndim == 2 else g
    lo, hi = mean.min(), mean.max()
    if not hi > lo:
        logger.warning("channel importance is constant; treating every channel as class-specific")
        return np.ones_like(mean)
    return (mean - lo) / (hi - lo)


def select_general_channels(importance, gamma_gen):
    return np.asarray(importance) < gamma_gen


def augment_feature(f_i, f_j, mask, gamma_p, rng):
    """Single-sample substitution; returns a new array (or ``f_i`` itself when not fired)."""
    if f_j is None:
        logger.warning("no donor feature available; open-set feature left unchanged")
        return f_i
    if rng.random() >= gamma_p:
        return f_i
    return np.where(mask, f_j, f_i)


def augment_batch(features, open_rows, mask, gamma_p, rng):
    """Apply the substitution to rows ``open_rows`` of a ``(B, d)`` tensor.

    For each open row an independent coin with probability ``gamma_p`` decides
    whether to swap; the donor is drawn uniformly from the other rows of the
    batch. Returns ``(augmented, fired_rows, donor_rows)``.
    """
    b = features.shape[0]
    open_rows = np.asarray(open_rows, dtype=np.int64)
    none = np.zeros(0, np.int64)
    if len(open_rows) == 0 or gamma_p <= 0 or not np.any(mask):
        return features, none, none
    if b < 2:
        logger.warning("batch of size 1 has no donor; open-set feature left unchanged")
        return features, none, none
    coins = rng.random(len(open_rows))
    offsets = rng.integers(1, b, size=len(open_rows))
    fire = coins < gamma_p
    rows = open_rows[fire]
    donors = (rows + offsets[fire]) % b
    if len(rows) == 0:
        return features, none, none
    gen = torch.as_tensor(mask, dtype=torch.bool)
    out = features.clone()
    out[rows] = torch.where(gen[None, :], features[donors], features[rows])
    return out, rows, donors
