"""
Ablation ladder
===============

Add the components one at a time on the same noisy data:

* ``ce``         cross-entropy on observed labels
* ``cls_cl_cn``  clean/noisy split with pseudo-labels for the noisy part
* ``cls``        plus open-set detection and dynamic labels
* ``cls_ensc``   plus the weighted contrastive term
* ``encofa``     plus open-set feature augmentation

Run with ``python notebooks/03_ablation_ladder.py``. ``SEEDS=0,1`` picks
seeds and ``QUICK=1`` shortens training.
"""
import os

import numpy as np

from encofa.config import RunConfig
from encofa.trainer import fit, load_data

SEEDS = [int(s) for s in os.environ.get("SEEDS", "0,1,2").split(",")]
EPOCHS = 20 if os.environ.get("QUICK") else 60
LADDER = ("ce", "cls_cl_cn", "cls", "cls_ensc", "encofa")

rows = {v: [] for v in LADDER}
for seed in SEEDS:
    cfg = RunConfig()
    cfg.train.seed, cfg.train.epochs = seed, EPOCHS
    splits = load_data(cfg)
    for variant in LADDER:
        cfg.train.variant = variant
        res = fit(cfg, splits=splits)
        last = res.history[-1]
        rows[variant].append((res.acc_test, res.acc_test_best, last["Acc_type_train"], last["F1_ON_train"]))
        print(f"seed {seed} {variant:>10}: Acc_test {res.acc_test:.3f}", flush=True)

# %% Mean over seeds
print(f"\n{'variant':>10}  Acc_test  Acc_test(best-val)  Acc_type  F1_ON")
for variant in LADDER:
    m = np.mean(rows[variant], axis=0)
    print(f"{variant:>10}  {m[0]:.3f}     {m[1]:.3f}               {m[2]:.3f}     {m[3]:.3f}")
