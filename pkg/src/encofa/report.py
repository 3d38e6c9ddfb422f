"""Run summaries and static plots, computed only from files in a run directory."""
import csv
import json
import os

import numpy as np

from .metrics import accuracy, noise_type_metrics

TYPE_CODES = {"CLEAN": 0, "CLOSED_NOISY": 1, "OPEN_NOISY": 2}
SUMMARY_FIELDS = ("acc_test", "acc_test_best", "acc_val", "acc_type_train", "f1_on_train", "pre_on_train")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    if v in ("", "nan"):
        return float("nan")
    f = float(v)
    return int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f


def read_metrics(run_dir):
    return [{k: _num(v) for k, v in row.items()} for row in read_csv(os.path.join(run_dir, "metrics.csv"))]


def _test_accuracy(rows, model):
    sel = [r for r in rows if r["model"] == model]
    return accuracy([int(r["predicted"]) for r in sel], [int(r["true_label"]) for r in sel])


def _triage_from_audit(audit_rows, epoch):
    rows = [r for r in audit_rows if int(r["epoch"]) == epoch]
    assigned = np.array([TYPE_CODES[r["assigned_type"]] for r in rows])
    truth = np.array([TYPE_CODES[r["true_type"]] for r in rows])
    return noise_type_metrics(assigned, truth)


def summarize(run_dir):
    """Recompute the headline metrics of a finished run from its CSV artifacts."""
    history = read_metrics(run_dir)
    if not history:
        raise ValueError(f"{run_dir}: metrics.csv has no rows")
    preds = read_csv(os.path.join(run_dir, "predictions.csv"))
    final = history[-1]
    best = max(history, key=lambda r: (r["Acc_val"], -r["epoch"]))

    audit_path = os.path.join(run_dir, "triage_audit.csv")
    audit = read_csv(audit_path) if os.path.exists(audit_path) else []
    if audit:
        last = max(int(r["epoch"]) for r in audit)
        acc_type, f1_on, pre_on = _triage_from_audit(audit, last)
    else:
        # no triage ever ran: every sample counted clean
        last = None
        acc_type, f1_on, pre_on = final["Acc_type_train"], final["F1_ON_train"], final["Pre_ON_train"]

    summary = {
        "acc_test": _test_accuracy(preds, "final"),
        "acc_test_best": _test_accuracy(preds, "best"),
        "acc_val": final["Acc_val"],
        "acc_val_best": best["Acc_val"],
        "best_epoch": best["epoch"],
        "acc_type_train": acc_type,
        "f1_on_train": f1_on,
        "pre_on_train": pre_on,
        "triage_epoch": last,
        "epochs": len(history),
        "history": history,
    }
    cfg_path = os.path.join(run_dir, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            summary["config"] = json.load(fh)
    return summary


def collate_metrics(run_dirs, out_path):
    """Stack several runs' metrics.csv into one table with a leading run column."""
    rows, header = [], None
    for rd in run_dirs:
        for r in read_csv(os.path.join(rd, "metrics.csv")):
            header = header or ["run"] + list(r)
            rows.append([rd] + list(r.values()))
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return out_path


def linear_projection(features, method="pca", seed=0):
    """2-D projection matrix ``(d, 2)`` for a feature scatter."""
    x = np.asarray(features, dtype=np.float64)
    if method == "pca":
        centered = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        return vt[:2].T
    if method == "random":
        q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(x.shape[1], 2)))
        return q
    if method == "first2":
        return np.eye(x.shape[1])[:, :2]
    raise ValueError(f"unknown projection {method!r}; choose pca, random or first2")


def plot_training_curves(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ep = [r["epoch"] for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(ep, [r["L_cls"] for r in history], label="L_cls")
    axes[0].plot(ep, [r["L_ensc"] for r in history], label="L_ensc")
    axes[0].set_title("losses")
    axes[1].plot(ep, [r["Acc_val"] for r in history], label="Acc_val")
    axes[1].plot(ep, [r["Acc_type_train"] for r in history], label="Acc_type")
    axes[1].plot(ep, [r["F1_ON_train"] for r in history], label="F1_ON")
    axes[1].set_ylim(0, 1.02)
    axes[1].set_title("accuracy")
    for key in ("n_CL", "n_CN", "n_ON"):
        axes[2].plot(ep, [r[key] for r in history], label=key)
    axes[2].set_title("triage sizes")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_feature_scatter(npz_path, path, method="pca", seed=0):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = np.load(npz_path)
    f = data["features"]
    xy = (f - f.mean(axis=0)) @ linear_projection(f, method, seed)
    true_type = data["true_type"]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    markers = {0: ("o", "clean"), 1: ("^", "closed-set noisy"), 2: ("x", "open-set noisy")}
    for t, (m, name) in markers.items():
        sel = true_type == t
        if not sel.any():
            continue
        if t < 2:
            color = dict(c=data["true_label"][sel], cmap="tab10", vmin=0, vmax=9)
        else:
            color = dict(color="k")
        ax.scatter(xy[sel, 0], xy[sel, 1], marker=m, s=10, alpha=0.7, label=name, **color)
    ax.set_title(f"train features ({method} projection)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_report(run_dir, projection="pca", seed=0, plots=True):
    summary = summarize(run_dir)
    out = os.path.join(run_dir, "summary.json")
    with open(out, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
    files = [out]
    if plots:
        files.append(plot_training_curves(summary["history"], os.path.join(run_dir, "training_curves.png")))
        npz = os.path.join(run_dir, "features.npz")
        if os.path.exists(npz):
            files.append(plot_feature_scatter(npz, os.path.join(run_dir, "feature_scatter.png"), projection, seed))
    return summary, files
