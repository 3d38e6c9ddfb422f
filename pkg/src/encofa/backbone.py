"""Classification backbone: encoder, softmax head and normalized projector."""
import json
import struct

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .exceptions import DataError, StateError

CHECKPOINT_MAGIC = b"ENCOFACK"
CHECKPOINT_VERSION = 1


class Backbone(nn.Module):
    """Encoder + FC head + projector.

    ``arch="mlp"`` takes flat vectors; ``arch="cnn"`` takes ``(C, H, W)``
    images and average-pools the last convolutional feature map. Either way
    the encoder output ``f`` has ``feature_dim`` channels.
    """

    def __init__(self, input_shape, num_classes, arch="mlp", hidden=(128,), feature_dim=64,
                 proj_dim=32, conv_channels=(16, 32), dtype=torch.float64):
        super().__init__()
        self.config = {"input_shape": [int(s) for s in input_shape], "num_classes": int(num_classes),
                       "arch": arch, "hidden": [int(h) for h in hidden], "feature_dim": int(feature_dim),
                       "proj_dim": int(proj_dim), "conv_channels": [int(c) for c in conv_channels],
                       "dtype": str(dtype).replace("torch.", "")}
        self.arch = arch
        if arch == "mlp":
            layers, width = [], int(np.prod(input_shape))
            for h in hidden:
                layers += [nn.Linear(width, h), nn.ReLU()]
                width = h
            layers += [nn.Linear(width, feature_dim), nn.ReLU()]
            self.trunk = nn.Sequential(*layers)
        elif arch == "cnn":
            if len(input_shape) != 3:
                raise DataError(f"cnn backbone needs (C, H, W) inputs, got shape {tuple(input_shape)}")
            layers, width = [], input_shape[0]
            for c in conv_channels:
                layers += [nn.Conv2d(width, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(), nn.MaxPool2d(2)]
                width = c
            layers += [nn.Conv2d(width, feature_dim, 3, padding=1), nn.ReLU()]
            self.trunk = nn.Sequential(*layers)
        else:
            raise ValueError(f"unknown backbone arch {arch!r}")
        self.head = nn.Linear(feature_dim, num_classes)
        self.projector = nn.Linear(feature_dim, proj_dim)
        self.to(dtype)
        self._forward_seen = False

    @property
    def feature_dim(self):
        return self.config["feature_dim"]

    @property
    def num_classes(self):
        return self.config["num_classes"]

    def feature_map(self, x):
        if self.arch == "mlp":
            x = x.reshape(len(x), -1)
        self._forward_seen = True
        return self.trunk(x)

    def pool(self, fmap):
        return fmap if fmap.dim() == 2 else fmap.mean(dim=(2, 3))

    def encode(self, x):
        return self.pool(self.feature_map(x))

    def logits(self, f):
        return self.head(f)

    def classify(self, f):
        return torch.softmax(self.head(f), dim=1)

    def project(self, f):
        return normalize_rows(self.projector(f))

    def forward(self, x):
        f = self.encode(x)
        return f, self.logits(f), self.project(f)

    def record_channel_gradients(self, x):
        """Per-sample gradient of the predicted-class logit w.r.t. the last
        feature map, average-pooled over space; shape ``(N, feature_dim)``.

        Samples do not interact (the model is put in eval mode), so one
        backward pass over the summed logits yields every per-sample gradient.
        """
        if not self._forward_seen:
            raise StateError("record_channel_gradients called before any forward pass")
        was_training = self.training
        self.eval()
        try:
            with torch.enable_grad():
                fmap = self.feature_map(x).detach().requires_grad_(True)
                logits = self.head(self.pool(fmap))
                pred = logits.argmax(dim=1, keepdim=True)
                (grad,) = torch.autograd.grad(logits.gather(1, pred).sum(), fmap)
        finally:
            self.train(was_training)
        return self.pool(grad).detach()

    @classmethod
    def from_config(cls, config):
        cfg = dict(config)
        cfg["dtype"] = getattr(torch, cfg.get("dtype", "float64"))
        return cls(**cfg)


def normalize_rows(v):
    """L2-normalize each row; an all-zero row maps to the first basis vector."""
    norm = v.norm(dim=1, keepdim=True)
    zero = norm.squeeze(1) == 0
    if bool(zero.any()):
        basis = torch.zeros_like(v)
        basis[:, 0] = 1.0
        v = torch.where(zero[:, None], basis, v)
        norm = torch.where(zero[:, None], torch.ones_like(norm), norm)
    return v / norm


def rotate_image(image, degrees):
    """Bilinear in-plane rotation of a ``(C, H, W)`` array about its center."""
    return ndimage.rotate(image, degrees, axes=(2, 1), reshape=False, order=1, mode="nearest")


class WeakAugment:
    """Label-preserving perturbation used for pseudo-label views.

    Images get a random horizontal flip and a rotation in
    ``[-max_degrees, max_degrees]``. Vectors get additive Gaussian jitter with
    per-dimension scale ``jitter_sigma``, clipped at ``jitter_clip`` sigmas.
    """

    def __init__(self, enabled=True, jitter_sigma=None, max_degrees=10.0, jitter_clip=3.0):
        self.enabled = enabled
        self.jitter_sigma = None if jitter_sigma is None else np.asarray(jitter_sigma, dtype=np.float64)
        self.max_degrees = max_degrees
        self.jitter_clip = jitter_clip

    @classmethod
    def from_training_data(cls, inputs, enabled=True, scale=0.05, **kwargs):
        sigma = scale * inputs.reshape(len(inputs), -1).std(axis=0) if inputs.ndim == 2 else None
        return cls(enabled=enabled, jitter_sigma=sigma, **kwargs)

    def __call__(self, inputs, rng):
        if not self.enabled:
            return inputs
        if inputs.ndim == 4:
            out = np.empty_like(inputs)
            flips = rng.random(len(inputs)) < 0.5
            angles = rng.uniform(-self.max_degrees, self.max_degrees, size=len(inputs))
            for i, img in enumerate(inputs):
                img = img[:, :, ::-1] if flips[i] else img
                out[i] = rotate_image(img, angles[i])
            return out
        sigma = self.jitter_sigma if self.jitter_sigma is not None else np.zeros(inputs.shape[1:])
        noise = np.clip(rng.standard_normal(inputs.shape), -self.jitter_clip, self.jitter_clip)
        return inputs + noise * sigma


# --- checkpoints ---------------------------------------------------------
#
# Layout: MAGIC (8 bytes) | version u32 | descriptor length u32 | descriptor
# JSON (utf-8) | raw little-endian parameter buffers in descriptor order.

def save_checkpoint(path, model, extra=None):
    state = model.state_dict()
    tensors = []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        tensors.append({"name": name, "dtype": arr.dtype.str.replace(">", "<").replace("=", "<"),
                        "shape": list(arr.shape)})
    descriptor = json.dumps({"architecture": model.config, "tensors": tensors, "extra": extra or {}},
                            sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(descriptor)))
        fh.write(descriptor)
        for meta, t in zip(tensors, state.values()):
            fh.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.dtype(meta["dtype"])).tobytes())


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic header)")
    version, n = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(blob[16:16 + n].decode("utf-8"))
    model = Backbone.from_config(desc["architecture"])
    offset = 16 + n
    state = {}
    for meta in desc["tensors"]:
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(meta["shape"])
        offset += count * dt.itemsize
        state[meta["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, desc.get("extra", {})


def cross_entropy_per_sample(logits, labels):
    return F.cross_entropy(logits, labels, reduction="none")
