import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from encofa.backbone import (
    CHECKPOINT_MAGIC, Backbone, WeakAugment, load_checkpoint, normalize_rows, rotate_image,
    save_checkpoint,
)
from encofa.exceptions import DataError, StateError


def make(d_in=8, K=3, **kw):
    torch.manual_seed(0)
    return Backbone((d_in,), K, hidden=kw.pop("hidden", (16,)), feature_dim=kw.pop("feature_dim", 16), **kw)


def test_zero_encoder_gives_zero_features():
    m = make()
    with torch.no_grad():
        for p in m.trunk.parameters():
            p.zero_()
    f = m.encode(torch.randn(4, 8, dtype=torch.float64))
    assert torch.equal(f, torch.zeros_like(f))


def test_encode_deterministic_in_eval():
    m = make().eval()
    x = torch.randn(1, 8, dtype=torch.float64).repeat(2, 1)
    f = m.encode(x)
    assert torch.equal(f[0], f[1])


def test_classify_examples():
    m = make()
    with torch.no_grad():
        m.head.bias.zero_()
    p = m.classify(torch.zeros(2, 16, dtype=torch.float64))
    assert torch.allclose(p, torch.full((2, 3), 1 / 3, dtype=torch.float64))
    f = torch.randn(5, 16, dtype=torch.float64)
    with torch.no_grad():
        before = m.classify(f)
        m.head.bias += 7.0
        assert torch.allclose(m.classify(f), before, atol=1e-12)
    logits = torch.tensor([[math.log(3), 0.0]], dtype=torch.float64)
    assert torch.allclose(torch.softmax(logits, 1), torch.tensor([[0.75, 0.25]], dtype=torch.float64))


def test_project_unit_norm_and_fallback():
    assert torch.allclose(normalize_rows(torch.tensor([[3.0, 4.0]])), torch.tensor([[0.6, 0.8]]))
    assert torch.equal(normalize_rows(torch.zeros(1, 3)), torch.tensor([[1.0, 0.0, 0.0]]))
    m = make()
    with torch.no_grad():
        m.projector.bias.zero_()
        f = torch.randn(6, 16, dtype=torch.float64)
        assert torch.allclose(m.project(f), m.project(5 * f), atol=1e-12)
        assert torch.allclose(m.project(f).norm(dim=1), torch.ones(6, dtype=torch.float64), atol=1e-6)


def test_outputs_finite():
    m = make()
    x = torch.as_tensor(np.random.default_rng(0).normal(scale=10, size=(1000, 8)))
    f, logits, z = m(x)
    assert torch.isfinite(f).all() and torch.isfinite(logits).all() and torch.isfinite(z).all()


def test_parameter_gradients_match_finite_differences():
    m = make(d_in=4, K=3, hidden=(6,), feature_dim=5)
    x = torch.as_tensor(np.random.default_rng(1).normal(size=(6, 4)))
    y = torch.tensor([0, 1, 2, 0, 1, 2])

    def loss():
        return F.cross_entropy(m.logits(m.encode(x)), y)

    m.zero_grad()
    loss().backward()
    rng = np.random.default_rng(2)
    for p in m.parameters():
        if p.grad is None:
            continue
        direction = torch.as_tensor(rng.normal(size=p.shape))
        analytic = float((p.grad * direction).sum())
        h = 1e-4
        with torch.no_grad():
            p += h * direction
            up = loss().item()
            p -= 2 * h * direction
            down = loss().item()
            p += h * direction
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


def test_weak_augment_vectors():
    x = np.random.default_rng(0).normal(size=(50, 8))
    aug = WeakAugment.from_training_data(x)
    out = aug(x, np.random.default_rng(1))
    sigma = 0.05 * x.std(axis=0)
    assert np.all(np.abs(out - x) <= 3 * sigma + 1e-12)
    assert not np.array_equal(out, x)
    assert WeakAugment(enabled=False)(x, np.random.default_rng(0)) is x


def test_weak_augment_images():
    imgs = np.random.default_rng(0).random((3, 3, 16, 16))
    out = WeakAugment()(imgs, np.random.default_rng(0))
    assert out.shape == imgs.shape and np.isfinite(out).all()


def test_rotation_roundtrip():
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    img = np.stack([np.sin(3 * xx) * np.cos(2 * yy)] * 3)
    back = rotate_image(rotate_image(img, 8.0), -8.0)
    inner = (slice(None), slice(6, 26), slice(6, 26))
    assert np.max(np.abs(back[inner] - img[inner])) < 1e-2


def test_channel_gradients_require_forward():
    m = make()
    with pytest.raises(StateError):
        m.record_channel_gradients(torch.zeros(1, 8, dtype=torch.float64))


def test_channel_gradients_linear_head_oracle():
    m = make()
    x = torch.randn(1, 8, dtype=torch.float64).repeat(2, 1)
    m.encode(x)
    g = m.record_channel_gradients(x)
    assert g.shape == (2, 16)
    assert torch.equal(g[0], g[1])
    pred = m.logits(m.encode(x)).argmax(1)
    assert torch.allclose(g, m.head.weight[pred].detach())


def test_channel_gradients_cnn_shape():
    torch.manual_seed(0)
    m = Backbone((3, 8, 8), 4, arch="cnn", feature_dim=16, conv_channels=(4,))
    x = torch.randn(5, 3, 8, 8, dtype=torch.float64)
    m.encode(x)
    g = m.record_channel_gradients(x)
    assert g.shape == (5, 16) and torch.isfinite(g).all()


def test_cnn_rejects_vector_input():
    with pytest.raises(DataError):
        Backbone((8,), 3, arch="cnn")


@pytest.mark.parametrize("arch,shape", [("mlp", (8,)), ("cnn", (3, 8, 8))])
def test_checkpoint_roundtrip_bit_exact(tmp_path, arch, shape):
    torch.manual_seed(3)
    m = Backbone(shape, 3, arch=arch, feature_dim=8, conv_channels=(4,), hidden=(16,))
    path = tmp_path / "m.bin"
    save_checkpoint(path, m, extra={"epoch": 7})
    assert path.read_bytes()[:8] == CHECKPOINT_MAGIC
    loaded, extra = load_checkpoint(path)
    assert extra == {"epoch": 7}
    assert loaded.config == m.config
    for (n1, a), (n2, b) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and a.dtype == b.dtype
        assert a.numpy().tobytes() == b.numpy().tobytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_trained_features_cluster_by_class():
    from encofa.config import RunConfig
    from encofa.trainer import fit

    cfg = RunConfig()
    cfg.data.n_per_class = 60
    cfg.noise.alpha = 0.0
    cfg.train.variant = "ce"
    cfg.train.epochs = 30
    splits_res = fit(cfg)
    model, splits = splits_res.model, splits_res.extras["trainer"].splits
    with torch.no_grad():
        f = model.eval().encode(torch.as_tensor(splits.test.inputs)).numpy()
    y = splits.test.true_label
    d = np.linalg.norm(f[:, None] - f[None], axis=-1)
    same = y[:, None] == y[None]
    off = ~np.eye(len(y), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()
