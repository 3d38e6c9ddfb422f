"""Training orchestration: warm-up, then per-epoch triage and robust training.

Every epoch t reads only the cache written at the end of epoch t-1 (losses,
features and pooled channel gradients from an un-augmented pass), so triage
never depends on batch order within the current epoch.
"""
import copy
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from ._random import stream_rng
from .backbone import Backbone, WeakAugment, save_checkpoint
from .config import dump_config_json
from .dataset import NoiseSpec, generate_blobs, inject_noise, load_image_folder, load_splits
from .exceptions import ConfigError, StateError
from .metrics import accuracy, classification_accuracy, noise_type_metrics, predict
from .noise_identifier import Partition, triage
from .osfeataug import augment_batch, compute_channel_importance, select_general_channels

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "L_cls", "L_ensc", "Acc_val", "Acc_type_train", "F1_ON_train",
                  "Pre_ON_train", "n_CL", "n_CN", "n_ON"]
AUDIT_HEADER = ["epoch", "id", "loss", "posterior", "ood_score", "assigned_type", "true_type", "augmented"]
MASK_HEADER = ["epoch", "channel", "importance", "is_general"]
PREDICTIONS_HEADER = ["model", "id", "true_label", "predicted"]
TYPE_NAMES = ("CLEAN", "CLOSED_NOISY", "OPEN_NOISY")


@dataclass
class EpochCache:
    losses: np.ndarray
    features: np.ndarray
    channel_grads: np.ndarray
    probs: np.ndarray
    epoch_index: int


@dataclass
class VariantFlags:
    triage: bool
    detect_open: bool
    lam: float
    gamma_p: float


def variant_flags(variant, hyper):
    """Component switches for the ablation ladder, from plain CE up to the full method."""
    return {
        "ce": VariantFlags(False, False, 0.0, 0.0),
        "cls_cl_cn": VariantFlags(True, False, 0.0, 0.0),
        "cls": VariantFlags(True, True, 0.0, 0.0),
        "cls_ensc": VariantFlags(True, True, hyper.lam, 0.0),
        "encofa": VariantFlags(True, True, hyper.lam, hyper.gamma_p),
    }[variant]


def poly_lr(lr0, epoch, total, power=0.9):
    return lr0 * (1.0 - epoch / total) ** power


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(round(float(v), 12))
    return str(v)


@dataclass
class FitResult:
    model: Backbone
    history: list
    acc_test: float          # final-epoch model
    acc_test_best: float     # model with the best Acc_val
    best_epoch: int
    run_dir: str = None
    extras: dict = field(default_factory=dict)


class Trainer:
    """Holds the model, optimizer and per-purpose random streams for one run."""

    def __init__(self, config, splits):
        self.cfg = config
        self.splits = splits
        self.train_set = splits.train
        self.K = splits.num_classes
        self.seed = config.train.seed
        self.flags = variant_flags(config.train.variant, config.hyper)
        mc = config.model
        torch.manual_seed(self.seed)
        self.model = Backbone(self.train_set.input_shape, self.K, arch=mc.arch, hidden=mc.hidden,
                              feature_dim=mc.feature_dim, proj_dim=mc.proj_dim,
                              conv_channels=mc.conv_channels)
        self.dtype = next(self.model.parameters()).dtype
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.optim.lr,
                                          weight_decay=config.optim.weight_decay)
        self.augment = WeakAugment.from_training_data(self.train_set.inputs, enabled=config.train.augment)
        self.x_train = torch.as_tensor(self.train_set.inputs, dtype=self.dtype)
        self.y_train = torch.as_tensor(self.train_set.observed)
        self.history = []
        self.audit = []
        self.masks = []

    # -- plumbing ---------------------------------------------------------

    def set_lr(self, epoch):
        lr = poly_lr(self.cfg.optim.lr, epoch, self.cfg.train.epochs, self.cfg.optim.power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def batches(self, epoch):
        n = len(self.train_set)
        order = stream_rng(self.seed, "order", epoch).permutation(n)
        bs = self.cfg.optim.batch_size
        return [order[s:s + bs] for s in range(0, n, bs)]

    @torch.no_grad()
    def _probs(self, x, batch_size=512):
        self.model.eval()
        out = [self.model.classify(self.model.encode(torch.as_tensor(x[s:s + batch_size], dtype=self.dtype)))
               for s in range(0, len(x), batch_size)]
        self.model.train()
        return torch.cat(out).numpy() if out else np.zeros((0, self.K))

    def build_cache(self, epoch, batch_size=512):
        """Un-augmented pass over the training set at the end of ``epoch``."""
        self.model.eval()
        feats, losses, probs, grads = [], [], [], []
        with torch.no_grad():
            for s in range(0, len(self.train_set), batch_size):
                x = self.x_train[s:s + batch_size]
                f = self.model.encode(x)
                logits = self.model.logits(f)
                feats.append(f.numpy())
                losses.append(F.cross_entropy(logits, self.y_train[s:s + batch_size], reduction="none").numpy())
                probs.append(torch.softmax(logits, 1).numpy())
        for s in range(0, len(self.train_set), batch_size):
            grads.append(self.model.record_channel_gradients(self.x_train[s:s + batch_size]).numpy())
        self.model.train()
        return EpochCache(np.concatenate(losses), np.concatenate(feats), np.concatenate(grads),
                          np.concatenate(probs), epoch)

    def _record(self, epoch, lr, l_cls, l_ensc, partition):
        acc_val = classification_accuracy(self.model, self.splits.val, labels="observed")
        acc_type, f1_on, pre_on = noise_type_metrics(partition, self.train_set.true_type)
        row = {"epoch": epoch, "lr": lr, "L_cls": l_cls, "L_ensc": l_ensc, "Acc_val": acc_val,
               "Acc_type_train": acc_type, "F1_ON_train": f1_on, "Pre_ON_train": pre_on,
               "n_CL": len(partition.clean), "n_CN": len(partition.closed_noisy),
               "n_ON": len(partition.open_noisy)}
        self.history.append(row)
        return row

    # -- phases -------------------------------------------------------------

    def ce_epoch(self, epoch):
        """One epoch of plain cross-entropy on observed labels."""
        lr = self.set_lr(epoch)
        self.model.train()
        total = []
        for idx in self.batches(epoch):
            logits = self.model.logits(self.model.encode(self.x_train[idx]))
            loss = F.cross_entropy(logits, self.y_train[idx])
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            total.append(loss.item())
        return lr, float(np.mean(total))

    def warmup(self, epochs):
        for epoch in range(epochs):
            lr, l_cls = self.ce_epoch(epoch)
            self._record(epoch, lr, l_cls, 0.0, Partition.all_clean(len(self.train_set)))
        return self.build_cache(epochs - 1)

    def triage(self, cache, epoch):
        if cache.epoch_index != epoch - 1:
            raise StateError(f"epoch {epoch} triage given a cache from epoch {cache.epoch_index}")
        n = len(self.train_set)
        if self.cfg.train.force_all_clean or not self.flags.triage:
            return Partition.all_clean(n), np.ones(n), np.full(n, np.nan)
        h = self.cfg.hyper
        losses = cache.losses
        if h.loss_clip > 0:
            # a loss above clip * log K is "worse than a uniform guess" however large it is
            losses = np.minimum(losses, h.loss_clip * np.log(self.K))
        res = triage(losses, cache.features, h.gamma_cl, h.gamma_ood, k=h.k,
                     detect_open=self.flags.detect_open, seed=self.seed * 100003 + epoch, desk_k=h.desk_k,
                     var_floor=h.gmm_var_floor)
        return res.partition, res.posterior, res.ood_score

    def supervision(self, partition, cache, epoch):
        n, K = len(self.train_set), self.K
        pseudo = np.zeros((n, K))
        weights = None
        cn = partition.closed_noisy
        if len(cn):
            rng = stream_rng(self.seed, "augment", epoch)
            x = self.train_set.inputs[cn]
            p1 = self._probs(self.augment(x, rng))
            p2 = self._probs(self.augment(x, rng))
            pseudo[cn] = L.pseudo_label(p1, p2)
            pl_loss = L.soft_cross_entropy(pseudo[cn], cache.probs[cn])
            weights = L.pseudo_weights(pl_loss, seed=self.seed * 100003 + epoch)
        dyn = L.dynamic_labels(K, epoch, self.train_set.ids, self.seed)
        return L.refine_labels(partition, self.train_set.observed, pseudo, K, closed_weights=weights, dynamic=dyn)

    def channel_mask(self, cache, partition, epoch):
        h = self.cfg.hyper
        grads = cache.channel_grads
        if h.importance_source == "open" and len(partition.open_noisy):
            grads = grads[partition.open_noisy]
        importance = compute_channel_importance(grads)
        mask = select_general_channels(importance, h.gamma_gen)
        self.masks.extend({"epoch": epoch, "channel": c, "importance": float(importance[c]),
                           "is_general": int(mask[c])} for c in range(len(mask)))
        return mask

    def robust_epoch(self, epoch, cache):
        """One epoch of triage + three-branch supervision + contrastive term."""
        partition, posterior, ood_score = self.triage(cache, epoch)
        sup = self.supervision(partition, cache, epoch)
        mask = self.channel_mask(cache, partition, epoch) if self.flags.gamma_p > 0 else None
        aug_rng = stream_rng(self.seed, "osfeataug", epoch)
        lam, tau = self.flags.lam, self.cfg.hyper.tau
        lr = self.set_lr(epoch)
        self.model.train()
        augmented = np.zeros(len(self.train_set), dtype=np.int64)
        cls_hist, ensc_hist = [], []
        for idx in self.batches(epoch):
            kind, hard, soft, weight, refined = sup.tensors(idx, self.dtype)
            f = self.model.encode(self.x_train[idx])
            f_cls = f
            if mask is not None:
                open_rows = np.flatnonzero(kind.numpy() == L.OPEN)
                f_cls, fired, _ = augment_batch(f, open_rows, mask, self.flags.gamma_p, aug_rng)
                augmented[idx[fired]] += 1
            probs = self.model.classify(f_cls)
            l_cls = L.classification_loss(probs, kind, hard, soft, weight)
            l_ensc = L.ensc_loss(self.model.project(f), refined, weight, tau) if lam > 0 else f.new_zeros(())
            loss = L.total_loss(l_cls, l_ensc, lam)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            cls_hist.append(l_cls.item())
            ensc_hist.append(float(l_ensc.item()))

        assigned = partition.labels(len(self.train_set))
        for i in range(len(self.train_set)):
            self.audit.append({"epoch": epoch, "id": int(self.train_set.ids[i]), "loss": float(cache.losses[i]),
                               "posterior": float(posterior[i]), "ood_score": float(ood_score[i]),
                               "assigned_type": TYPE_NAMES[assigned[i]],
                               "true_type": TYPE_NAMES[int(self.train_set.true_type[i])],
                               "augmented": int(augmented[i])})
        self._record(epoch, lr, float(np.mean(cls_hist)), float(np.mean(ensc_hist)), partition)
        return self.build_cache(epoch), partition

    def run(self):
        """Train for the configured epochs; returns :class:`FitResult`."""
        cfg = self.cfg.train
        best_val, best_state, best_epoch = -1.0, None, -1
        if self.flags.triage:
            cache = self.warmup(cfg.warmup_epochs) if cfg.warmup_epochs else self.build_cache(-1)
            start = cfg.warmup_epochs
        else:
            start = 0
        for row in self.history:
            best_val, best_state, best_epoch = self._track(row, best_val, best_state, best_epoch)
        for epoch in range(start, cfg.epochs):
            if self.flags.triage:
                cache, _ = self.robust_epoch(epoch, cache)
            else:
                lr, l_cls = self.ce_epoch(epoch)
                self._record(epoch, lr, l_cls, 0.0, Partition.all_clean(len(self.train_set)))
            best_val, best_state, best_epoch = self._track(self.history[-1], best_val, best_state, best_epoch)

        final_pred = predict(self.model, self.splits.test.inputs)
        best_model = copy.deepcopy(self.model)
        best_model.load_state_dict(best_state)
        best_pred = predict(best_model, self.splits.test.inputs)
        self.predictions = ([("best", p) for p in best_pred], [("final", p) for p in final_pred])
        self.best_model = best_model
        test_labels = self.splits.test.true_label
        return FitResult(self.model, self.history, accuracy(final_pred, test_labels),
                         accuracy(best_pred, test_labels), best_epoch)

    def _track(self, row, best_val, best_state, best_epoch):
        if row["Acc_val"] > best_val or best_state is None:
            return row["Acc_val"], copy.deepcopy(self.model.state_dict()), row["epoch"]
        return best_val, best_state, best_epoch

    # -- persistence --------------------------------------------------------

    def write_run(self, run_dir, result):
        os.makedirs(run_dir, exist_ok=True)
        dump_config_json(self.cfg, os.path.join(run_dir, "config.json"))
        write_csv(os.path.join(run_dir, "metrics.csv"), METRICS_HEADER, self.history)
        write_csv(os.path.join(run_dir, "triage_audit.csv"), AUDIT_HEADER, self.audit)
        write_csv(os.path.join(run_dir, "channel_masks.csv"), MASK_HEADER, self.masks)
        test = self.splits.test
        rows = []
        for name, preds in (("best", self.predictions[0]), ("final", self.predictions[1])):
            rows.extend({"model": name, "id": int(test.ids[i]), "true_label": int(test.true_label[i]),
                         "predicted": int(p)} for i, (_, p) in enumerate(preds))
        write_csv(os.path.join(run_dir, "predictions.csv"), PREDICTIONS_HEADER, rows)
        save_checkpoint(os.path.join(run_dir, "checkpoint.bin"), self.model, extra={"epoch": self.cfg.train.epochs - 1})
        save_checkpoint(os.path.join(run_dir, "best.bin"), self.best_model, extra={"epoch": result.best_epoch})
        cache = self.build_cache(self.cfg.train.epochs - 1)
        np.savez(os.path.join(run_dir, "features.npz"), features=cache.features, ids=self.train_set.ids,
                 observed=self.train_set.observed, true_type=self.train_set.true_type,
                 true_label=self.train_set.true_label)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def load_data(config):
    """Materialize the (noisy) dataset a config describes."""
    d, nz = config.data, config.noise
    seed = config.train.seed if d.seed is None else d.seed
    if d.source == "csv":
        splits, pool = load_splits(d.path)
        if "noise" in splits.provenance or nz.alpha == 0:
            return splits
    elif d.source == "image_folder":
        splits, pool = load_image_folder(d.path, d.id_classes, d.ood_classes, tuple(d.image_size), seed=seed)
    else:
        splits, pool = generate_blobs(d.n_per_class, d.num_classes, d.num_ood_classes, d.dim,
                                      d.separation, seed=seed)
    if pool is None:
        pool = splits.test.subset(np.zeros(0, np.int64))
    spec = NoiseSpec(nz.alpha, nz.beta, seed=seed if nz.seed is None else nz.seed,
                     id_class_count=splits.num_classes, ood_class_count=splits.num_ood_classes,
                     instance_profile=nz.profile)
    return inject_noise(splits, pool, spec)


def fit(config, splits=None, run_dir=None):
    """Run one experiment; writes artifacts under ``run_dir`` when given."""
    config.validate()
    if splits is None:
        splits = load_data(config)
    if len(splits.train) < 2:
        raise ConfigError("training split needs at least 2 samples", key="data")
    trainer = Trainer(config, splits)
    result = trainer.run()
    if run_dir is not None:
        trainer.write_run(run_dir, result)
        result.run_dir = run_dir
    result.extras["trainer"] = trainer
    return result
