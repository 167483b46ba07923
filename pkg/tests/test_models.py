import zlib

import numpy as np
import pytest

from sm3.diffcore import Rng, Tensor, grad_check, no_grad
from sm3.losses import multilabel_ce
from sm3.models import (ConvEncoder, Encoder, LabelRelationModule, LayerNorm, Linear, MLP, MultiLabelClassifier,
                        ProjectionHead, RelationBlock, SelfAttention, TransformerEncoderLayer, classify, encode,
                        label_project_all, project, relate)
from sm3.optim import AdamW
from sm3.synthdata import DERM7PT_CLASS_COUNTS, GeneratorConfig, generate
from sm3.train import SM3Model, TrainConfig

F64 = np.float64


def zero_(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
    return module


def x64(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)


# -- encode / project ----------------------------------------------------------------

def test_encoder_zero_init_and_determinism():
    enc = Encoder(6, (5, 4), Rng(0))
    x = np.random.default_rng(0).standard_normal((3, 6)).astype(np.float32)
    assert np.array_equal(encode(enc, x).data, encode(enc, x).data)
    zero_(enc)
    assert not encode(enc, np.zeros((2, 6), np.float32)).data.any()


def test_identity_single_layer_encoder_is_activation():
    enc = Encoder(4, (4,), Rng(0), dtype=F64)
    enc.layers[0].weight.data = np.eye(4)
    enc.layers[0].bias.data = np.zeros(4)
    x = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(encode(enc, x).data, Tensor(x).gelu().data)


def test_encoder_shape_mismatch():
    with pytest.raises(ValueError):
        encode(Encoder(6, (4,), Rng(0)), np.zeros((2, 5), np.float32))


def test_projection_head_dims_and_zero_init():
    head = ProjectionHead(64, 128, Rng(0))
    h = Tensor(np.random.default_rng(0).standard_normal((2, 64)).astype(np.float32))
    assert project(head, h).shape == (2, 128)
    assert len(head.layers) == 2
    zero_(head)
    assert not project(head, h).data.any()


def test_encoder_branches_have_identical_shape_disjoint_storage():
    model = SM3Model(10, 10, (3, 2), TrainConfig())
    d, c = model.enc_derm.state_dict(), model.enc_clinic.state_dict()
    assert {k: v.shape for k, v in d.items()} == {k: v.shape for k, v in c.items()}
    for k in d:
        assert not np.shares_memory(d[k], c[k])
        assert not np.array_equal(d[k], c[k])


# -- label projection and classification ---------------------------------------------------

def test_label_project_all_counts():
    heads = [Linear(16, 512, Rng(k)) for k in range(8)]
    h = Tensor(np.ones((2, 16), np.float32))
    out = label_project_all(heads, h, 8)
    assert len(out) == 8 and all(o.shape == (2, 512) for o in out)
    assert len(label_project_all(heads[:1], h, 1)) == 1
    with pytest.raises(ValueError):
        label_project_all(heads, h, 7)
    for head in heads:
        head.bias.data[:] = 0
    assert not any(o.data.any() for o in label_project_all(heads, Tensor(np.zeros((1, 16), np.float32))))


def test_classify_counts_and_zero_heads():
    counts = DERM7PT_CLASS_COUNTS
    heads = [Linear(8, c, Rng(k)) for k, c in enumerate(counts)]
    toks = [Tensor(np.ones((3, 8), np.float32))] * len(counts)
    logits = classify(heads, toks)
    assert [lg.shape[1] for lg in logits] == list(counts)
    for head in heads:
        zero_(head)
    for lg in classify(heads, toks):
        assert not lg.data.any()
    with pytest.raises(ValueError):
        classify(heads, toks[:3])
    with pytest.raises(ValueError):
        classify(heads, [Tensor(np.ones((3, 7), np.float32))] * len(counts))


@pytest.mark.parametrize("strategy", ["no_proj", "proj", "msa", "tel", "te"])
def test_classifier_accepts_reference_class_counts(strategy):
    clf = MultiLabelClassifier(16, DERM7PT_CLASS_COUNTS, Rng(0), strategy, proj_dim=32, ffn_dim=16).eval()
    out = clf(Tensor(np.ones((4, 16), np.float32)))
    assert [o.shape for o in out] == [(4, c) for c in DERM7PT_CLASS_COUNTS]


# -- relation module -----------------------------------------------------------------------

def test_tel_has_exactly_one_layer_te_two():
    assert len(LabelRelationModule(8, Rng(0), "tel").layers) == 1
    assert len(LabelRelationModule(8, Rng(0), "te").layers) == 2
    assert isinstance(LabelRelationModule(8, Rng(0), "msa").layers[0], RelationBlock)
    with pytest.raises(ValueError):
        LabelRelationModule(8, Rng(0), "rnn")


@pytest.mark.parametrize("kind", ["msa", "tel", "te"])
def test_relate_permutation_equivariance(kind):
    module = LabelRelationModule(32, Rng(1), kind, ffn_dim=16).eval()
    rng = np.random.default_rng(2)
    tokens = [Tensor(rng.standard_normal((5, 32)).astype(np.float32)) for _ in range(6)]
    with no_grad():
        base = relate(module, tokens)
        for perm in [rng.permutation(6) for _ in range(10)]:
            out = relate(module, [tokens[i] for i in perm])
            for j, i in enumerate(perm):
                assert np.max(np.abs(out[j].data - base[i].data)) < 1e-6


def test_relate_unequal_dims():
    module = LabelRelationModule(4, Rng(0), "tel").eval()
    with pytest.raises(ValueError):
        relate(module, [Tensor(np.zeros(4)), Tensor(np.zeros(3))])


def test_zero_output_projections_make_relate_identity():
    module = LabelRelationModule(16, Rng(0), "tel", ffn_dim=8).eval()
    layer = module.layers[0]
    zero_(layer.attn.out)
    zero_(layer.ff2)
    tokens = [Tensor(np.random.default_rng(k).standard_normal(16).astype(np.float32)) for k in range(4)]
    for a, b in zip(relate(module, tokens), tokens):
        assert np.array_equal(a.data, b.data)


def test_single_token_hand_evaluation():
    dim = 6
    module = LabelRelationModule(dim, Rng(3), "tel", ffn_dim=5, dtype=F64).eval()
    L = module.layers[0]
    x = np.random.default_rng(4).standard_normal(dim)

    def ln(v, norm):
        c = v - v.mean()
        return c / np.sqrt((c * c).mean() + norm.eps) * norm.gamma.data + norm.beta.data

    def lin(v, layer):
        return v @ layer.weight.data + layer.bias.data

    # one token: the attention weight is exactly 1, so attention returns out(v(LN(x)))
    x1 = x + lin(lin(ln(x, L.norm1), L.attn.v), L.attn.out)
    hidden = Tensor(lin(ln(x1, L.norm2), L.ff1)).gelu().data
    expected = x1 + lin(hidden, L.ff2)
    (out,) = relate(module, [Tensor(x)])
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    assert L.attn.last_weights.shape[-1] == 1 and L.attn.last_weights.ravel()[0] == 1.0


def test_dropout_only_while_training():
    module = LabelRelationModule(8, Rng(0), "tel", dropout=0.5)
    module.set_dropout_rng(np.random.default_rng(0))
    tokens = [Tensor(np.random.default_rng(k).standard_normal((3, 8)).astype(np.float32)) for k in range(3)]
    train_out = relate(module.train(), tokens)[0].data
    module.eval()
    assert np.array_equal(relate(module, tokens)[0].data, relate(module, tokens)[0].data)
    assert not np.array_equal(train_out, relate(module, tokens)[0].data)


# -- gradients of every component -------------------------------------------------------------

def _components(r):
    return {
        "linear": (Linear(5, 3, r.child(1), F64), (4, 5)),
        "mlp": (MLP([5, 6, 3], r.child(2), dtype=F64), (4, 5)),
        "encoder": (Encoder(5, (6, 4), r.child(3), dtype=F64), (4, 5)),
        "conv_encoder": (ConvEncoder(2, (3,), 4, r.child(4), dtype=F64), (2, 2, 4, 4)),
        "projection_head": (ProjectionHead(5, 3, r.child(5), dtype=F64), (4, 5)),
        "layer_norm": (LayerNorm(5, dtype=F64), (4, 5)),
        "self_attention": (SelfAttention(5, r.child(6), dtype=F64), (2, 3, 5)),
        "msa": (LabelRelationModule(5, r.child(7), "msa", dtype=F64), (2, 3, 5)),
        "tel": (LabelRelationModule(5, r.child(8), "tel", ffn_dim=4, dtype=F64), (2, 3, 5)),
        "te": (LabelRelationModule(5, r.child(9), "te", ffn_dim=4, dtype=F64), (2, 3, 5)),
        "encoder_layer": (TransformerEncoderLayer(5, r.child(10), ffn_dim=4, dtype=F64), (2, 3, 5)),
    }


# each point is a fresh draw from the module's own initialisation plus a random input
@pytest.mark.parametrize("name", list(_components(Rng(0))))
def test_component_gradients(name):
    base = zlib.crc32(name.encode())
    for point in range(10):
        module, shape = _components(Rng(base + point))[name]
        module.eval()
        rng = np.random.default_rng(base + point)
        x = Tensor(rng.standard_normal(shape), requires_grad=True)
        if name == "layer_norm":
            for p in module.parameters():
                p.data = rng.standard_normal(p.shape)
        w = rng.standard_normal(module(x).shape)
        err = grad_check(lambda: (module(x) * Tensor(w)).sum(), [x, *module.parameters()])
        assert err < 1e-4, (name, point, err)


@pytest.mark.parametrize("strategy", ["no_proj", "proj", "msa", "tel", "te"])
def test_classifier_gradients(strategy):
    clf = MultiLabelClassifier(6, (3, 2), Rng(5), strategy, proj_dim=4, ffn_dim=3, dtype=F64).eval()
    rng = np.random.default_rng(1)
    y = np.stack([rng.integers(0, 3, 4), rng.integers(0, 2, 4)], axis=1)
    for _ in range(10):
        h = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        assert grad_check(lambda: multilabel_ce(clf(h), y), [h, *clf.parameters()]) < 1e-4


# -- training-level structure ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    return generate(GeneratorConfig(n_samples=60, derm_dim=8, clinic_dim=8, class_counts=(3, 2, 4), seed=0))


def _views(ds, n=16, seed=0):
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    noisy = lambda x: (x[idx] + 0.05 * rng.standard_normal(x[idx].shape)).astype(np.float32)
    return noisy(ds.x_derm), noisy(ds.x_derm), noisy(ds.x_clinic), noisy(ds.x_clinic)


@pytest.mark.parametrize("strategy", ["simclr", "concat", "sep_shared", "sep_sep"])
def test_no_dead_stage1_parameters(tiny, strategy):
    cfg = TrainConfig()
    cfg.stage1.strategy = strategy
    model = SM3Model(8, 8, tiny.class_counts, cfg)
    loss, _ = model.contrastive_loss(*_views(tiny))
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and np.linalg.norm(p.grad) > 1e-6, name


@pytest.mark.parametrize("strategy", ["no_proj", "proj", "msa", "tel", "te"])
def test_no_dead_classifier_parameters(tiny, strategy):
    model = SM3Model(8, 8, tiny.class_counts, TrainConfig(), "sep_sep", strategy)
    clf = model.classifier.train()
    if hasattr(clf, "relation"):
        clf.relation.set_dropout_rng(np.random.default_rng(0))
    h = model.fused_features(tiny.x_derm[:32], tiny.x_clinic[:32])
    multilabel_ce(clf(h), tiny.labels[:32]).backward()
    for name, p in model.named_parameters():
        if name.startswith(("classifier.", "enc_")):
            assert p.grad is not None and np.linalg.norm(p.grad) > 1e-6, name


def test_derm_only_step_leaves_clinical_branch_bitwise_unchanged(tiny):
    cfg = TrainConfig()
    cfg.stage1.strategy = "simclr"
    model = SM3Model(8, 8, tiny.class_counts, cfg)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = AdamW(model.parameters(), cfg.optimizer)
    xd1, xd2, _, _ = _views(tiny)
    for _ in range(3):
        opt.zero_grad()
        loss, parts = model.contrastive_loss(xd1, xd2, None, None)
        loss.backward()
        opt.step()
    after = model.state_dict()
    for k in before:
        changed = before[k].tobytes() != after[k].tobytes()
        assert changed == k.startswith(("enc_derm", "head_derm")), k
