"""Learnable components: encoders, projection heads, label heads, relation module."""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from sm3.diffcore import Rng, Tensor, concat, dropout, softmax, stack

MM_STRATEGIES = ("simclr", "concat", "sep_shared", "sep_sep")
ML_STRATEGIES = ("no_proj", "proj", "msa", "tel", "te")


class Module:
    """Parameter container.  Tensors and sub-modules assigned as attributes are registered."""

    training: bool = True

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items: Sequence[Module]):
        super().__init__()
        object.__setattr__(self, "_items", list(items))
        for i, m in enumerate(items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng: Rng, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "gelu":
        return x.gelu()
    if name == "relu":
        return x.relu()
    if name == "tanh":
        return x.tanh()
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _uniform(rng, (in_dim, out_dim), in_dim, dtype)
        self.bias = _uniform(rng, (out_dim,), in_dim, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected last dim {self.in_dim}, got {x.shape[-1]}")
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class MLP(Module):
    """Stack of linear layers; ``activation`` after every layer except optionally the last."""

    def __init__(self, widths: Sequence[int], rng: Rng, activation: str = "gelu",
                 activate_last: bool = False, dtype=np.float32):
        super().__init__()
        self.widths = list(widths)
        self.activation = activation
        self.activate_last = activate_last
        self.layers = [Linear(a, b, rng.child("layer", i), dtype) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def forward(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.activate_last:
                x = _activate(x, self.activation)
        return x


class Encoder(MLP):
    """Per-modality feature extractor f(.): MLP from input dim D to feature dim F.

    The activation is applied after every layer, so features are post-activation
    like pooled CNN features.
    """

    def __init__(self, in_dim: int, widths: Sequence[int], rng: Rng, activation: str = "gelu", dtype=np.float32):
        super().__init__([in_dim, *widths], rng, activation=activation, activate_last=True, dtype=dtype)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


class ConvEncoder(Module):
    """Tiny image encoder: 3x3 same-padded convolutions, global average pool, linear."""

    def __init__(self, in_channels: int, channels: Sequence[int], out_dim: int, rng: Rng,
                 activation: str = "gelu", dtype=np.float32):
        super().__init__()
        self.activation = activation
        self.out_dim = out_dim
        chans = [in_channels, *channels]
        self.convs = [Linear(9 * a, b, rng.child("conv", i), dtype) for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.fc = Linear(chans[-1], out_dim, rng.child("fc"), dtype)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, C, H, W)
        for conv in self.convs:
            x = _activate(conv(_im2col3x3(x)), self.activation)  # (B, H, W, C')
            x = x.transpose(0, 3, 1, 2)
        pooled = x.mean(axis=(2, 3))
        return _activate(self.fc(pooled), self.activation)


def _im2col3x3(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    padded = _pad_hw(x)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    patches = []
    for di in range(3):
        for dj in range(3):
            patches.append(padded[:, :, ii + di, jj + dj])  # (B, C, H, W)
    cols = stack(patches, axis=-1)  # (B, C, H, W, 9)
    cols = cols.transpose(0, 2, 3, 1, 4).reshape(b, h, w, c * 9)
    return cols


def _pad_hw(x: Tensor) -> Tensor:
    data = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return Tensor._make(data, (x,), lambda g: (g[:, :, 1:-1, 1:-1],))


class ProjectionHead(MLP):
    """g(.): two-layer perceptron F -> hidden -> Z with one hidden nonlinearity."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, hidden: int | None = None,
                 activation: str = "gelu", dtype=np.float32):
        super().__init__([in_dim, hidden or in_dim, out_dim], rng, activation=activation, dtype=dtype)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=-1, keepdims=True)
        return centred / (var + self.eps).sqrt() * self.gamma + self.beta


class SelfAttention(Module):
    """Single-head scaled dot-product self-attention over a token axis."""

    def __init__(self, dim: int, rng: Rng, dropout: float = 0.0, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.p = dropout
        self.q = Linear(dim, dim, rng.child("q"), dtype)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k = Linear(dim, dim, rng.child("k"), dtype, bias=False)
        self.v = Linear(dim, dim, rng.child("v"), dtype)
        self.out = Linear(dim, dim, rng.child("out"), dtype)
        self.drop_rng: np.random.Generator | None = None
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, T, E)
        scores = (self.q(x) @ self.k(x).swapaxes(-1, -2)) * (1.0 / math.sqrt(self.dim))
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        weights = dropout(weights, self.p, self.drop_rng, self.training)
        return self.out(weights @ self.v(x))


class RelationBlock(Module):
    """Residual self-attention without normalisation or feed-forward (the ``msa`` variant)."""

    def __init__(self, dim: int, rng: Rng, dropout: float = 0.1, dtype=np.float32):
        super().__init__()
        self.p = dropout
        self.attn = SelfAttention(dim, rng.child("attn"), dropout, dtype)
        self.drop_rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return x + dropout(self.attn(x), self.p, self.drop_rng, self.training)


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: x + SA(LN(x)), then x + FFN(LN(x)).

    No positional encoding, so tokens are treated as an unordered set.
    """

    def __init__(self, dim: int, rng: Rng, ffn_dim: int = 128, dropout: float = 0.1,
                 activation: str = "gelu", dtype=np.float32):
        super().__init__()
        self.p = dropout
        self.activation = activation
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = SelfAttention(dim, rng.child("attn"), dropout, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ff1 = Linear(dim, ffn_dim, rng.child("ff1"), dtype)
        self.ff2 = Linear(ffn_dim, dim, rng.child("ff2"), dtype)
        self.drop_rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        p, r, t = self.p, self.drop_rng, self.training
        x = x + dropout(self.attn(self.norm1(x)), p, r, t)
        hidden = dropout(_activate(self.ff1(self.norm2(x)), self.activation), p, r, t)
        return x + dropout(self.ff2(hidden), p, r, t)


class LabelRelationModule(Module):
    """W(.): mixes the K label tokens.  ``kind`` is one of msa, tel, te."""

    def __init__(self, dim: int, rng: Rng, kind: str = "tel", ffn_dim: int = 128,
                 dropout: float = 0.1, dtype=np.float32):
        super().__init__()
        self.kind = kind
        if kind == "msa":
            self.layers = [RelationBlock(dim, rng.child("block", 0), dropout, dtype)]
        elif kind in ("tel", "te"):
            depth = 1 if kind == "tel" else 2
            self.layers = [TransformerEncoderLayer(dim, rng.child("layer", i), ffn_dim, dropout, dtype=dtype)
                           for i in range(depth)]
        else:
            raise ValueError(f"unknown relation module kind {kind!r}")

    def set_dropout_rng(self, gen: np.random.Generator | None) -> None:
        for layer in self.layers:
            layer.drop_rng = gen
            layer.attn.drop_rng = gen

    def forward(self, tokens: Tensor) -> Tensor:
        x = tokens
        for layer in self.layers:
            x = layer(x)
        return x


def relate(module: LabelRelationModule, tokens: Sequence[Tensor] | Tensor) -> list[Tensor]:
    """Refine K label embeddings jointly.  Accepts a list of (B, E) or (E,) tensors."""
    if isinstance(tokens, Tensor):
        tokens = [tokens[k] for k in range(tokens.shape[0])]
    dims = {t.shape[-1] for t in tokens}
    if len(dims) != 1:
        raise ValueError(f"label tokens must share one embedding dim, got {sorted(dims)}")
    single = tokens[0].ndim == 1
    x = stack(tokens, axis=0 if single else 1)  # (K, E) or (B, K, E)
    if single:
        x = x.reshape(1, *x.shape)
    y = module(x)
    if single:
        return [y[0, k] for k in range(len(tokens))]
    return [y[:, k] for k in range(len(tokens))]


class MultiLabelClassifier(Module):
    """The classifier h(.) stacked on the fused two-branch feature.

    no_proj: q_k(h);  proj: q_k(p_k(h));  msa/tel/te: q_k(W(p_1(h), ..., p_K(h))_k).
    """

    def __init__(self, in_dim: int, class_counts: Sequence[int], rng: Rng, strategy: str = "tel",
                 proj_dim: int = 512, ffn_dim: int = 128, dropout: float = 0.1, dtype=np.float32):
        super().__init__()
        if strategy not in ML_STRATEGIES:
            raise ValueError(f"unknown multi-label strategy {strategy!r}")
        self.strategy = strategy
        self.class_counts = [int(c) for c in class_counts]
        self.in_dim = in_dim
        token_dim = in_dim
        if strategy != "no_proj":
            self.label_proj = [Linear(in_dim, proj_dim, rng.child("p", k), dtype) for k in range(len(class_counts))]
            token_dim = proj_dim
        if strategy in ("msa", "tel", "te"):
            self.relation = LabelRelationModule(token_dim, rng.child("W"), strategy, ffn_dim, dropout, dtype)
        self.heads = [Linear(token_dim, c, rng.child("q", k), dtype) for k, c in enumerate(class_counts)]

    @property
    def K(self) -> int:
        return len(self.class_counts)

    def tokens(self, h: Tensor) -> list[Tensor]:
        """Label-specific embeddings fed to the heads (post-relation when a relation module exists)."""
        if self.strategy == "no_proj":
            return [h] * self.K
        toks = label_project_all(self.label_proj, h, self.K)
        if self.strategy in ("msa", "tel", "te"):
            toks = relate(self.relation, toks)
        return toks

    def pre_relation_tokens(self, h: Tensor) -> list[Tensor]:
        if self.strategy == "no_proj":
            return [h] * self.K
        return label_project_all(self.label_proj, h, self.K)

    def forward(self, h: Tensor) -> list[Tensor]:
        return classify(self.heads, self.tokens(h))


def encode(branch: Module, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return branch(x)


def project(head: ProjectionHead, h: Tensor) -> Tensor:
    return head(h)


def label_project_all(heads: Sequence[Linear], h_cat: Tensor, K: int | None = None) -> list[Tensor]:
    if K is not None and len(heads) != K:
        raise ValueError(f"configured K={K} but {len(heads)} label projection heads")
    return [p(h_cat) for p in heads]


def classify(heads: Sequence[Linear], tokens: Sequence[Tensor]) -> list[Tensor]:
    if len(heads) != len(tokens):
        raise ValueError(f"{len(heads)} heads for {len(tokens)} tokens")
    return [q(t) for q, t in zip(heads, tokens)]


def fuse(h_derm: Tensor, h_clinic: Tensor) -> Tensor:
    """Inference-time fusion: concatenate the two branch features."""
    return concat([h_derm, h_clinic], axis=-1)
