import itertools
import math

import numpy as np
import pytest

from glam.doc_model import ClassSchema
from glam.errors import ContractError, FormatError, VersionError
from glam.model import (
    GLAM,
    Checkpoint,
    GraphInput,
    ModelConfig,
    checkpoint_bytes,
    count_parameters,
    joint_loss,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
    tag_conv,
    train,
)
from glam.tensor import SparseAdjacency, Tensor
from test_tensor import dense_norm_adj, numeric_grad, rel_err


def random_input(rng, n, F=33, G=11, p=0.5, n_classes=12, dtype=np.float64):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    src = np.array([a for a, b in pairs] + [b for a, b in pairs], dtype=np.int64)
    dst = np.array([b for a, b in pairs] + [a for a, b in pairs], dtype=np.int64)
    return GraphInput(
        x=rng.standard_normal((n, F)).astype(dtype),
        adj=SparseAdjacency.from_edges(n, src, dst),
        src=src,
        dst=dst,
        edge_x=rng.standard_normal((len(src), G)).astype(dtype),
        node_labels=rng.integers(0, n_classes, n),
        edge_labels=rng.integers(0, 2, len(src)),
    )


def dense_tag(x, A, ws, b):
    out = np.zeros((x.shape[0], ws[0].shape[1]))
    for k, w in enumerate(ws):
        out += np.linalg.matrix_power(A, k) @ x @ w
    return out + b


def _check_tag(rng, n, src, dst, K):
    x = rng.standard_normal((n, 4)).astype(np.float32)
    ws = [rng.standard_normal((4, 3)).astype(np.float32) * 0.5 for _ in range(K + 1)]
    b = rng.standard_normal((1, 3)).astype(np.float32)
    got = tag_conv(Tensor(x), SparseAdjacency.from_edges(n, src, dst), [Tensor(w) for w in ws], Tensor(b)).data
    want = dense_tag(x.astype(np.float64), dense_norm_adj(n, src, dst), ws, b)
    assert np.abs(got - want).max() <= 1e-5


def test_tag_exhaustive_small_graphs():
    rng = np.random.default_rng(0)
    for n in range(1, 6):
        pairs = list(itertools.combinations(range(n), 2))
        for mask in range(2 ** len(pairs)):
            chosen = [p for k, p in enumerate(pairs) if mask >> k & 1]
            _check_tag(rng, n, [a for a, _ in chosen], [b for _, b in chosen], K=3)


def test_tag_random_graphs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        m = int(rng.integers(0, 3 * n))
        _check_tag(rng, n, rng.integers(0, n, m), rng.integers(0, n, m), K=int(rng.integers(0, 5)))


def test_tag_k0_is_linear():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal((1, 3))
    adj = SparseAdjacency.from_edges(5, [0, 1], [1, 2])
    np.testing.assert_allclose(tag_conv(Tensor(x), adj, [Tensor(w)], Tensor(b)).data, x @ w + b)


def test_tag_no_edges_any_k():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 4))
    ws = [rng.standard_normal((4, 3)) for _ in range(4)]
    b = rng.standard_normal((1, 3))
    got = tag_conv(Tensor(x), SparseAdjacency.from_edges(4, [], []), [Tensor(w) for w in ws], Tensor(b)).data
    np.testing.assert_allclose(got, x @ ws[0] + b)


def test_uniform_logits_loss():
    C, n, e = 12, 7, 9
    loss = joint_loss(Tensor(np.zeros((n, C))), np.arange(n) % C, Tensor(np.zeros((e, 2))), np.arange(e) % 2, 4.0)
    assert loss.item() == pytest.approx(math.log(C) + 4 * math.log(2), rel=1e-12)


def test_one_hot_logits_loss_vanishes():
    labels = np.array([0, 2, 1])
    logits = np.full((3, 3), -50.0)
    logits[np.arange(3), labels] = 50.0
    el = np.array([1, 0])
    elog = np.where(np.eye(2)[el] > 0, 50.0, -50.0)
    assert joint_loss(Tensor(logits), labels, Tensor(elog), el).item() < 1e-30


def _np_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


@pytest.mark.parametrize("alpha", [0.0, 1.0, 4.0])
def test_loss_decomposition(alpha):
    rng = np.random.default_rng(4)
    nl, el = rng.standard_normal((8, 12)), rng.standard_normal((10, 2))
    ny, ey = rng.integers(0, 12, 8), rng.integers(0, 2, 10)
    got = joint_loss(Tensor(nl), ny, Tensor(el), ey, alpha).item()
    assert got == pytest.approx(_np_ce(nl, ny) + alpha * _np_ce(el, ey), rel=1e-12)


SMALL = dict(hidden0=16, depth=2, tag_hops=2, embed_dim=8)


@pytest.mark.parametrize("rep", range(20))
def test_joint_loss_gradcheck(rep):
    """Whole network, train mode, float64, on a random 6-node graph."""
    rng = np.random.default_rng(rep)
    g = random_input(rng, 6, p=0.6)
    model = GLAM(ModelConfig(seed=rep, **SMALL)).astype(np.float64)
    # move batch-norm affine parameters off their init so their gradients are generic
    for name, p in model.params.items():
        if name.endswith(("gamma", "beta", ".b")):
            p.data[...] = rng.standard_normal(p.shape) * 0.3 + (1.0 if name.endswith("gamma") else 0.0)
    names = list(model.params)

    def loss_at(*arrays):
        m = GLAM(model.config, dict(zip(names, arrays)))
        out = m.forward(g, "train", update_stats=False)
        return joint_loss(out.node_logits, g.node_labels, out.edge_logits, g.edge_labels, 4.0).item()

    out = model.forward(g, "train", update_stats=False)
    joint_loss(out.node_logits, g.node_labels, out.edge_logits, g.edge_labels, 4.0).backward()
    arrays = [model.params[n].data.copy() for n in names]
    numeric = numeric_grad(loss_at, arrays)
    for name, num in zip(names, numeric):
        got = model.params[name].grad
        got = np.zeros_like(num) if got is None else got
        assert rel_err(got, num) < 1e-4, name


def _default_model():
    cfg = ModelConfig(seed=7)
    return GLAM(cfg)


def test_parameter_count_band():
    cfg = ModelConfig()
    # hand tally: stage widths 1024/512, 256/128, 64/32; four hop weights per TAG layer
    F, G, K1, E = 33, 11, 4, 256
    stages = [(33, 1024, 512), (512, 256, 128), (128, 64, 32)]
    n = 2 * F
    for fin, wt, wl in stages:
        n += K1 * fin * wt + wt + wt * wl + wl
    n += (32 + F) * E + E + E * E + E + E * 12 + 12
    n += 2 * (2 * E + G) + (2 * E + G) * E + E + E * 2 + 2
    assert count_parameters(cfg) == n == 1474886
    assert 500_000 <= n <= 2_500_000
    assert _default_model().num_parameters() == n


def test_isolated_single_node():
    rng = np.random.default_rng(8)
    g = random_input(rng, 1, dtype=np.float32)
    out = _default_model().predict(g)
    assert out.node_probs.shape == (1, 12)
    assert out.node_probs.sum() == pytest.approx(1.0, abs=1e-6)
    assert out.edge_probs.shape == (0, 2)


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    g = random_input(rng, 9, p=0.4, dtype=np.float32)
    model = _default_model()
    out = model.predict(g)
    perm = rng.permutation(9)
    inv = np.argsort(perm)
    eperm = rng.permutation(g.e)
    src, dst = inv[g.src][eperm], inv[g.dst][eperm]
    h = GraphInput(g.x[perm], SparseAdjacency.from_edges(9, src, dst), src, dst, g.edge_x[eperm])
    out2 = model.predict(h)
    np.testing.assert_allclose(out2.node_logits.data, out.node_logits.data[perm], atol=1e-5)
    np.testing.assert_allclose(out2.edge_logits.data, out.edge_logits.data[eperm], atol=1e-5)


def test_receptive_field():
    cfg = ModelConfig(seed=1)
    reach = cfg.tag_hops * cfg.depth
    n = reach + 3
    src = np.arange(n - 1)
    dst = src + 1
    src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    rng = np.random.default_rng(10)
    x = rng.standard_normal((n, 33)).astype(np.float32)
    ex = np.zeros((len(src), 11), np.float32)

    def logits(feat):
        g = GraphInput(feat, SparseAdjacency.from_edges(n, src, dst), src, dst, ex)
        return GLAM(cfg).predict(g).node_logits.data[0]

    base = logits(x)
    far = x.copy()
    far[reach + 1:] = 0  # beyond reach from node 0
    np.testing.assert_array_equal(logits(far), base)
    near = x.copy()
    near[1] += 5.0
    assert not np.array_equal(logits(near), base)


def test_wrong_feature_width():
    rng = np.random.default_rng(11)
    with pytest.raises(VersionError):
        _default_model().predict(random_input(rng, 3, F=40, dtype=np.float32))
    ckpt = Checkpoint.from_model(_default_model(), 1, ClassSchema())
    with pytest.raises(VersionError):
        ckpt.check_features(40, 1)


def test_config_contracts():
    with pytest.raises(ContractError):
        ModelConfig(hidden0=100)
    with pytest.raises(ContractError):
        ModelConfig(depth=0)


def test_checkpoint_byte_round_trip(tmp_path):
    ckpt = Checkpoint.from_model(_default_model(), 1, ClassSchema(), epoch=3)
    data = checkpoint_bytes(ckpt)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    assert path.read_bytes() == data
    again = load_checkpoint(path)
    assert checkpoint_bytes(again) == data
    assert again.extra == {"epoch": 3}
    assert again.config == ckpt.config


def test_checkpoint_corruption():
    data = checkpoint_bytes(Checkpoint.from_model(GLAM(ModelConfig(**SMALL)), 1, ClassSchema()))
    with pytest.raises(FormatError):
        parse_checkpoint(data[:-3])
    with pytest.raises(FormatError):
        parse_checkpoint(data[:20])
    with pytest.raises(FormatError):
        parse_checkpoint(b"NOTACKPT" + data[8:])
    with pytest.raises(FormatError):
        parse_checkpoint(data + b"\0")
    bumped = data[:8] + (99).to_bytes(4, "little") + data[12:]
    with pytest.raises(VersionError):
        parse_checkpoint(bumped)


def test_calibrate_sets_population_stats():
    rng = np.random.default_rng(12)
    graphs = [random_input(rng, n, dtype=np.float32) for n in (3, 5, 8)]
    model = GLAM(ModelConfig(**SMALL))
    model.calibrate(graphs)
    pooled = np.concatenate([g.x for g in graphs]).astype(np.float64)
    np.testing.assert_allclose(model.buffers["bn_in.running_mean"][0], pooled.mean(0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(model.buffers["bn_in.running_var"][0], pooled.var(0), rtol=1e-5, atol=1e-6)


@pytest.fixture(scope="module")
def tiny_corpus(merged_corpus):
    return merged_corpus[2][:3]


def test_training_deterministic(tiny_corpus, schema):
    cfg = ModelConfig(seed=4, hidden0=64, depth=2)
    a = train(tiny_corpus, cfg, schema, epochs=3)
    b = train(tiny_corpus, cfg, schema, epochs=3)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_zero_lr_keeps_parameters(tiny_corpus, schema):
    cfg = ModelConfig(seed=4, hidden0=64, depth=2)
    ckpt = train(tiny_corpus, cfg, schema, epochs=4, lr=0.0)
    init = GLAM(cfg)
    for name, p in init.params.items():
        np.testing.assert_array_equal(ckpt.params[name], p.data)


def test_unknown_schedule(tiny_corpus, schema):
    with pytest.raises(ContractError):
        train(tiny_corpus, ModelConfig(**SMALL), schema, epochs=1, schedule="step")


def test_unlabeled_corpus_rejected(small_corpus, schema):
    from glam.graph_build import build_graph
    with pytest.raises(ContractError):
        train([build_graph(small_corpus[0][0])], ModelConfig(**SMALL), schema, epochs=1)


def test_one_page_overfit(merged_corpus, schema):
    page = merged_corpus[2][0]
    losses = []
    train([page], ModelConfig(seed=0), schema, epochs=200, on_epoch=lambda e: losses.append(e.loss))
    assert all(b < a for a, b in zip(losses[:10], losses[1:10]))
    assert losses[-1] < 0.05


def test_selection_without_val_uses_frozen_epochs(tiny_corpus, schema):
    # 8 epochs, last 2 frozen: train-mode losses from epochs 1-6 must not win
    ckpt = train(tiny_corpus, ModelConfig(seed=4, hidden0=64, depth=2), schema, epochs=8)
    assert ckpt.extra["epoch"] in (7, 8)
