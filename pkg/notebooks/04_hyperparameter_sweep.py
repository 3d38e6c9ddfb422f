"""
Hyper-parameter sweep over config files
=======================================

Writes one TOML file per grid point under ``notebooks/out/sweep`` and runs
each through the ``encofa train`` command, then collates the metrics. The
grid below spans the usual tuning ranges. That is 5000 points, so by
default only a random subset is run (``SWEEP_POINTS``, default 6).

This is a plain driver script, not a built-in optimizer: pick the winner by
validation accuracy, never by test accuracy.
"""
import csv
import itertools
import os
import random
import subprocess
import sys

OUT = os.path.join(os.path.dirname(__file__), "out", "sweep")
POINTS = int(os.environ.get("SWEEP_POINTS", "6"))
EPOCHS = int(os.environ.get("SWEEP_EPOCHS", "30"))

GRID = {
    "gamma_cl": [0.65, 0.75, 0.85, 0.95, 0.96, 0.97, 0.98, 0.99],
    "gamma_ood": [0.95, 0.96, 0.97, 0.98, 0.99],
    "lambda": [0.5, 1.0, 1.5, 2.0, 2.5],
    "gamma_gen": [0.1, 0.2, 0.3, 0.4, 0.5],
    "gamma_p": [0.1, 0.3, 0.5, 0.7, 0.9],
}

points = list(itertools.product(*GRID.values()))
print(f"{len(points)} grid points; running {min(POINTS, len(points))}", flush=True)
random.Random(0).shuffle(points)

os.makedirs(OUT, exist_ok=True)
results = []
for i, values in enumerate(points[:POINTS]):
    name = f"p{i:03d}"
    cfg_path = os.path.join(OUT, f"{name}.toml")
    hyper = "\n".join(f"{k} = {v}" for k, v in zip(GRID, values))
    with open(cfg_path, "w") as fh:
        fh.write(f"[hyper]\n{hyper}\n\n[train]\nepochs = {EPOCHS}\n")
    run_dir = os.path.join(OUT, name)
    subprocess.run([sys.executable, "-m", "encofa.cli", "train", "--config", cfg_path, "--run-dir", run_dir],
                   check=True)
    with open(os.path.join(run_dir, "metrics.csv")) as fh:
        best_val = max(float(r["Acc_val"]) for r in csv.DictReader(fh))
    results.append((best_val, name, dict(zip(GRID, values))))

# %% Rank by best validation accuracy (observed labels, like the trainer's model selection).
for best_val, name, values in sorted(results, key=lambda r: -r[0]):
    print(f"{name}  best Acc_val {best_val:.3f}  {values}", flush=True)
subprocess.run([sys.executable, "-m", "encofa.cli", "report", "--no-plots",
                "--collate", os.path.join(OUT, "all_metrics.csv")]
               + [a for _, n, _ in results for a in ("--run-dir", os.path.join(OUT, n))], check=True)
