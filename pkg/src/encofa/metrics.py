import numpy as np
import torch

from .noise_identifier import Partition

OPEN = 2


def precision_recall_f1(pred_pos, true_pos):
    """Binary precision/recall/F1 with the 0 convention for empty denominators."""
    pred_pos = np.asarray(pred_pos, bool)
    true_pos = np.asarray(true_pos, bool)
    tp = int((pred_pos & true_pos).sum())
    n_pred, n_true = int(pred_pos.sum()), int(true_pos.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def noise_type_metrics(partition, truth):
    """``(acc_type, f1_on, pre_on)`` of a triage against true noise types.

    ``partition`` may be a :class:`Partition` or a per-sample array of type
    codes (0 clean, 1 closed-set, 2 open-set).
    """
    truth = np.asarray(truth, dtype=np.int64)
    assigned = partition.labels(len(truth)) if isinstance(partition, Partition) else np.asarray(partition)
    if len(truth) == 0:
        return 0.0, 0.0, 0.0
    acc = float((assigned == truth).mean())
    pre, _, f1 = precision_recall_f1(assigned == OPEN, truth == OPEN)
    return acc, f1, pre


def accuracy(predicted, labels):
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    return float((predicted == labels).mean()) if len(labels) else 0.0


@torch.no_grad()
def predict(model, inputs, batch_size=512):
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(inputs), batch_size):
        x = torch.as_tensor(inputs[start:start + batch_size], dtype=dtype)
        out.append(model.logits(model.encode(x)).argmax(dim=1).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def classification_accuracy(model, split, labels="true"):
    """Accuracy on a split against its true labels (test) or observed labels (val)."""
    target = split.true_label if labels == "true" else split.observed
    return accuracy(predict(model, split.inputs), target)
