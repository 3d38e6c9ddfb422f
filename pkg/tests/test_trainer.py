import numpy as np
import pytest

from encofa.config import RunConfig
from encofa.exceptions import StateError
from encofa.trainer import (
    AUDIT_HEADER, MASK_HEADER, METRICS_HEADER, PREDICTIONS_HEADER, Trainer, fit, load_data, poly_lr,
)


def small(variant="encofa", epochs=6, **kw):
    cfg = RunConfig()
    cfg.data.n_per_class = kw.pop("n_per_class", 60)
    cfg.train.variant = variant
    cfg.train.epochs = epochs
    cfg.train.warmup_epochs = kw.pop("warmup", 2)
    for k, v in kw.items():
        sec, key = k.split("__")
        setattr(getattr(cfg, sec), key, v)
    return cfg.validate()


def test_poly_lr_endpoints():
    assert poly_lr(0.01, 0, 50) == 0.01
    assert poly_lr(0.01, 50, 50) == 0.0
    lrs = [poly_lr(1.0, t, 10) for t in range(11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_warmup_reduces_loss():
    cfg = small(warmup=1)
    tr = Trainer(cfg, load_data(cfg))
    before = tr.build_cache(-1).losses.mean()
    after = tr.warmup(1).losses.mean()
    assert after < before


def test_zero_warmup_still_caches():
    cfg = small(warmup=0)
    tr = Trainer(cfg, load_data(cfg))
    state = {k: v.clone() for k, v in tr.model.state_dict().items()}
    cache = tr.build_cache(-1)
    assert len(cache.losses) == len(cache.features) == len(cache.channel_grads) == len(tr.train_set)
    assert all((state[k] == v).all() for k, v in tr.model.state_dict().items())
    res = fit(cfg)
    assert len(res.history) == cfg.train.epochs


def test_stale_cache_rejected():
    cfg = small()
    tr = Trainer(cfg, load_data(cfg))
    cache = tr.warmup(2)
    with pytest.raises(StateError):
        tr.triage(cache, 4)


def test_partition_covers_training_set_every_epoch():
    res = fit(small(epochs=5))
    n = len(res.extras["trainer"].train_set)
    for row in res.history:
        assert row["n_CL"] + row["n_CN"] + row["n_ON"] == n
        assert 0 <= row["Acc_type_train"] <= 1


def test_every_sample_supervised_once_per_epoch():
    cfg = small()
    tr = Trainer(cfg, load_data(cfg))
    cache = tr.warmup(2)
    partition, _, _ = tr.triage(cache, 2)
    sup = tr.supervision(partition, cache, 2)
    assert len(sup) == len(tr.train_set)


def test_ce_variant_has_no_triage():
    res = fit(small("ce", epochs=3))
    assert all(r["n_CN"] == r["n_ON"] == 0 and r["L_ensc"] == 0 for r in res.history)


@pytest.mark.slow
def test_triage_beats_majority_and_random_baselines():
    cfg = RunConfig()
    cfg.train.epochs = 30
    res = fit(cfg)
    last = res.history[-1]
    alpha, beta = cfg.noise.alpha, cfg.noise.beta
    assert last["Acc_type_train"] > 1 - alpha
    # F1 of flagging a random alpha*beta fraction as open-set equals alpha*beta
    assert last["F1_ON_train"] >= alpha * beta + 0.30


def test_fit_deterministic_and_headers(tmp_path):
    cfg = small(epochs=4)
    fit(cfg, run_dir=tmp_path / "a")
    fit(cfg, run_dir=tmp_path / "b")
    for name in ("metrics.csv", "triage_audit.csv", "channel_masks.csv", "predictions.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    golden = {"metrics.csv": METRICS_HEADER, "triage_audit.csv": AUDIT_HEADER,
              "channel_masks.csv": MASK_HEADER, "predictions.csv": PREDICTIONS_HEADER}
    for name, header in golden.items():
        assert (tmp_path / "a" / name).read_text().splitlines()[0].split(",") == header
    assert METRICS_HEADER == ["epoch", "lr", "L_cls", "L_ensc", "Acc_val", "Acc_type_train", "F1_ON_train",
                              "Pre_ON_train", "n_CL", "n_CN", "n_ON"]
    for name in ("config.json", "checkpoint.bin", "best.bin", "features.npz"):
        assert (tmp_path / "a" / name).exists()


def test_seed_changes_run():
    a = fit(small(epochs=3))
    cfg = small(epochs=3)
    cfg.train.seed = 1
    b = fit(cfg)
    assert [r["L_cls"] for r in a.history] != [r["L_cls"] for r in b.history]


def test_best_model_tracks_val():
    res = fit(small(epochs=5))
    best = max(r["Acc_val"] for r in res.history)
    assert res.history[res.best_epoch]["Acc_val"] == best
    assert 0 <= res.acc_test_best <= 1


def test_open_importance_source_runs():
    res = fit(small(epochs=4, hyper__importance_source="open"))
    assert np.isfinite(res.history[-1]["L_cls"])
