"""Ensemble layer zoo.

Every layer consumes a row-aligned minibatch: inputs ``X`` plus, where
relevant, a per-row member index and per-row hyperparameters λ. Member
weights are never materialized on the forward path; the rank-1 factors and
embeddings are applied as broadcasts:

    x W_k(λ) = [(x ∘ r_k) W] ∘ s_k + [(x ∘ u_k) Δ] ∘ v_k ∘ e(λ)
    b_k(λ)   = b_k + δ_k ∘ e'(λ)

``materialize`` methods build the explicit per-member weights and exist for
oracles and the L2 regularizer's reference path.

The embedding's output layer starts at zero, so a fresh layer computes the
plain batch-ensemble function. Δ and δ start random: if they started at zero
too, the modulation term would sit at a saddle where neither factor gets a
gradient.
"""

import numpy as np

from .diffcore import ops
from .diffcore.tensor import Tensor, as_tensor

RANK1_INITS = ("normal_0.5", "normal_0.75", "signs_0.5", "signs_0.75", "ones")
EMBEDDINGS = ("linear", "mlp_tanh_64")


def glorot(gen, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape)


def init_rank1(gen, shape, scheme="normal_0.5"):
    """Rank-1 factor initialization; ``normal_v`` means N(1, v) with variance v."""
    if scheme == "ones":
        return np.ones(shape)
    if scheme.startswith("normal_"):
        var = float(scheme.split("_")[1])
        return gen.normal(1.0, np.sqrt(var), size=shape)
    if scheme.startswith("signs_"):
        p = float(scheme.split("_")[1])
        return np.where(gen.random(shape) < p, 1.0, -1.0)
    raise ValueError(f"unknown rank-1 init {scheme!r}; choose from {RANK1_INITS}")


class Layer:
    def params(self):
        """Ordered ``{name: Tensor}``; shared storage appears once."""
        raise NotImplementedError

    def param_count(self):
        return sum(p.values.size for p in self.params().values())


def _normalize(lam, schema):
    lam = as_tensor(lam)
    lo, hi = np.log(schema.lower), np.log(schema.upper)
    return (ops.log(lam) - lo) * (2.0 / (hi - lo)) - 1.0


class Embedding(Layer):
    """Map λ rows to (e(λ), e'(λ)), each of width ``out_dim``.

    Input λ is log-normalized to [-1, 1] per schema bounds. The final layer
    starts at zero so e ≡ e' ≡ 0 at initialization.
    """

    def __init__(self, schema, out_dim, arch="linear", gen=None, hidden=64):
        if arch not in EMBEDDINGS:
            raise ValueError(f"unknown embedding {arch!r}")
        self.schema = schema
        self.arch = arch
        self.out_dim = out_dim
        m = schema.m
        if arch == "linear":
            self.C = Tensor.param(np.zeros((m, 2 * out_dim)), name="emb.C")
        else:
            gen = gen if gen is not None else np.random.default_rng(0)
            self.W1 = Tensor.param(glorot(gen, (m, hidden), m, hidden), name="emb.W1")
            self.b1 = Tensor.param(np.zeros(hidden), name="emb.b1")
            self.W2 = Tensor.param(np.zeros((hidden, 2 * out_dim)), name="emb.W2")
            self.b2 = Tensor.param(np.zeros(2 * out_dim), name="emb.b2")

    def params(self):
        if self.arch == "linear":
            return {"C": self.C}
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def __call__(self, lam):
        z = _normalize(lam, self.schema)
        if self.arch == "linear":
            out = z @ self.C
        else:
            out = ops.tanh(z @ self.W1 + self.b1) @ self.W2 + self.b2
        s = self.out_dim
        return out[:, :s], out[:, s:]

    def output_bound(self):
        """Bound on |e_j|, |e'_j| valid for mlp_tanh_64 (tanh in [-1, 1])."""
        if self.arch != "mlp_tanh_64":
            raise ValueError("bound only defined for the tanh MLP embedding")
        return np.abs(self.W2.values).sum(axis=0) + np.abs(self.b2.values)


def embed(embedding, lam):
    return embedding(lam)


class Dense(Layer):
    def __init__(self, r, s, gen):
        self.W = Tensor.param(glorot(gen, (r, s), r, s), name="W")
        self.b = Tensor.param(np.zeros(s), name="b")

    def params(self):
        return {"W": self.W, "b": self.b}

    def __call__(self, X, member_index=None, lam=None):
        return as_tensor(X) @ self.W + self.b


class Conv(Layer):
    def __init__(self, size, c_in, c_out, gen, stride=1, padding="valid"):
        self.K = Tensor.param(glorot(gen, (size, size, c_in, c_out), size * size * c_in,
                                     size * size * c_out), name="K")
        self.b = Tensor.param(np.zeros(c_out), name="b")
        self.stride, self.padding = stride, padding

    def params(self):
        return {"K": self.K, "b": self.b}

    def __call__(self, X, member_index=None, lam=None):
        return ops.conv2d(X, self.K, self.stride, self.padding) + self.b


def _check_members(member_index, K):
    member_index = np.asarray(member_index, dtype=np.intp)
    if member_index.size and (member_index.min() < 0 or member_index.max() >= K):
        raise IndexError(f"member index out of range [0, {K})")
    return member_index


class BatchEnsembleDense(Layer):
    """Shared W with per-member rank-1 factors r_k s_k^T and biases b_k."""

    def __init__(self, r, s, K, gen, rank1_init="normal_0.5", rank1_gen=None):
        self.K = K
        rank1_gen = rank1_gen if rank1_gen is not None else gen
        self.W = Tensor.param(glorot(gen, (r, s), r, s), name="W")
        self.r = Tensor.param(init_rank1(rank1_gen, (K, r), rank1_init), name="r")
        self.s = Tensor.param(init_rank1(rank1_gen, (K, s), rank1_init), name="s")
        self.b = Tensor.param(np.zeros((K, s)), name="b")

    def params(self):
        return {"W": self.W, "r": self.r, "s": self.s, "b": self.b}

    def __call__(self, X, member_index, lam=None):
        idx = _check_members(member_index, self.K)
        R = ops.take_rows(self.r, idx)
        S = ops.take_rows(self.s, idx)
        B = ops.take_rows(self.b, idx)
        return ((as_tensor(X) * R) @ self.W) * S + B

    def materialize(self, k):
        W = self.W.values * np.outer(self.r.values[k], self.s.values[k])
        return W, self.b.values[k].copy()


def batch_ens_dense(layer, X, member_index):
    return layer(X, member_index)


class STNDense(Layer):
    """Self-tuning dense layer: W(λ) = W + Δ ∘ e(λ)^T, b(λ) = b + δ ∘ e'(λ)."""

    def __init__(self, r, s, schema, gen, embedding="linear", emb_gen=None):
        self.schema = schema
        mod_gen = emb_gen if emb_gen is not None else gen
        self.W = Tensor.param(glorot(gen, (r, s), r, s), name="W")
        self.b = Tensor.param(np.zeros(s), name="b")
        self.Delta = Tensor.param(glorot(mod_gen, (r, s), r, s), name="Delta")
        self.delta = Tensor.param(glorot(mod_gen, (s,), r, s), name="delta")
        self.embedding = Embedding(schema, s, embedding, mod_gen)

    def params(self):
        out = {"W": self.W, "b": self.b, "Delta": self.Delta, "delta": self.delta}
        out.update({f"emb.{k}": v for k, v in self.embedding.params().items()})
        return out

    def __call__(self, X, member_index=None, lam=None):
        lam_v = lam.values if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
        self.schema.check(lam_v)
        X = as_tensor(X)
        e, e2 = self.embedding(lam)
        return X @ self.W + (X @ self.Delta) * e + self.b + self.delta * e2


def stn_dense(layer, X, lam):
    return layer(X, lam=lam)


class _HyperBatchBase(Layer):
    def _init_factors(self, K, n_in, n_out, rank1_init, rank1_gen, couple, mod_gen, fan_in, fan_out):
        self.K = K
        self.couple_uv_to_rs = couple
        self.r = Tensor.param(init_rank1(rank1_gen, (K, n_in), rank1_init), name="r")
        self.s = Tensor.param(init_rank1(rank1_gen, (K, n_out), rank1_init), name="s")
        if couple:
            self.u, self.v = self.r, self.s
        else:
            self.u = Tensor.param(init_rank1(rank1_gen, (K, n_in), rank1_init), name="u")
            self.v = Tensor.param(init_rank1(rank1_gen, (K, n_out), rank1_init), name="v")
        self.b = Tensor.param(np.zeros((K, n_out)), name="b")
        self.delta = Tensor.param(glorot(mod_gen, (K, n_out), fan_in, fan_out), name="delta")

    def params(self):
        out = {self._weight_name: self.W, "Delta": self.Delta, "r": self.r, "s": self.s}
        if not self.couple_uv_to_rs:
            out.update({"u": self.u, "v": self.v})
        out.update({"b": self.b, "delta": self.delta})
        out.update({f"emb.{k}": v for k, v in self.embedding.params().items()})
        return out

    def _gathered(self, member_index, lam):
        idx = _check_members(member_index, self.K)
        e, e2 = self.embedding(lam)
        R = ops.take_rows(self.r, idx)
        S = ops.take_rows(self.s, idx)
        U = ops.take_rows(self.u, idx)
        V = ops.take_rows(self.v, idx)
        B = ops.take_rows(self.b, idx)
        D = ops.take_rows(self.delta, idx)
        return R, S, U, V, B, D, e, e2

    def embed_rows(self, lam):
        e, e2 = self.embedding(lam)
        return e.values, e2.values


class HyperBatchDense(_HyperBatchBase):
    """Hyper-batch ensemble dense layer (batch ensemble ∘ self-tuning layer)."""

    _weight_name = "W"

    def __init__(self, r, s, K, schema, gen, rank1_init="normal_0.5", embedding="linear",
                 couple_uv_to_rs=False, regularize_rank1=True, rank1_gen=None, emb_gen=None):
        self.schema = schema
        self.regularize_rank1 = regularize_rank1
        mod_gen = emb_gen if emb_gen is not None else gen
        self.W = Tensor.param(glorot(gen, (r, s), r, s), name="W")
        self.Delta = Tensor.param(glorot(mod_gen, (r, s), r, s), name="Delta")
        self._init_factors(K, r, s, rank1_init, rank1_gen if rank1_gen is not None else gen,
                           couple_uv_to_rs, mod_gen, r, s)
        self.embedding = Embedding(schema, s, embedding, mod_gen)

    def __call__(self, X, member_index, lam):
        R, S, U, V, B, D, e, e2 = self._gathered(member_index, lam)
        X = as_tensor(X)
        return ((X * R) @ self.W) * S + ((X * U) @ self.Delta) * (V * e) + B + D * e2

    def materialize(self, k, lam):
        """Explicit W_k(λ), b_k(λ) for a single λ vector."""
        e, e2 = self.embed_rows(np.atleast_2d(lam))
        W = self.W.values * np.outer(self.r.values[k], self.s.values[k])
        Dk = self.Delta.values * np.outer(self.u.values[k], self.v.values[k])
        return W + Dk * e[0][None, :], self.b.values[k] + self.delta.values[k] * e2[0]


def hyper_batch_dense(layer, X, member_index, lam):
    return layer(X, member_index, lam)


class HyperBatchConv(_HyperBatchBase):
    """Convolutional analog; rank-1 factors broadcast over the spatial axes."""

    _weight_name = "K"

    def __init__(self, size, c_in, c_out, K, schema, gen, rank1_init="normal_0.5",
                 embedding="linear", couple_uv_to_rs=False, regularize_rank1=True,
                 stride=1, padding="valid", rank1_gen=None, emb_gen=None):
        self.schema = schema
        self.regularize_rank1 = regularize_rank1
        self.stride, self.padding = stride, padding
        self.W = Tensor.param(glorot(gen, (size, size, c_in, c_out), size * size * c_in,
                                     size * size * c_out), name="K")
        fan_in, fan_out = size * size * c_in, size * size * c_out
        mod_gen = emb_gen if emb_gen is not None else gen
        self.Delta = Tensor.param(glorot(mod_gen, (size, size, c_in, c_out), fan_in, fan_out),
                                  name="Delta")
        self._init_factors(K, c_in, c_out, rank1_init,
                           rank1_gen if rank1_gen is not None else gen, couple_uv_to_rs,
                           mod_gen, fan_in, fan_out)
        self.embedding = Embedding(schema, c_out, embedding, mod_gen)

    @property
    def kernel(self):
        return self.W

    def __call__(self, X, member_index, lam):
        R, S, U, V, B, D, e, e2 = self._gathered(member_index, lam)
        X = as_tensor(X)
        n = X.shape[0]
        ci, co = self.W.shape[2], self.W.shape[3]

        def spatial(t, c):
            return ops.reshape(t, (n, 1, 1, c))

        main = ops.conv2d(X * spatial(R, ci), self.W, self.stride, self.padding) * spatial(S, co)
        mod = ops.conv2d(X * spatial(U, ci), self.Delta, self.stride, self.padding)
        mod = mod * spatial(V * e, co)
        return main + mod + spatial(B + D * e2, co)

    def materialize(self, k, lam):
        e, e2 = self.embed_rows(np.atleast_2d(lam))
        rs = np.outer(self.r.values[k], self.s.values[k])
        uv = np.outer(self.u.values[k], self.v.values[k])
        Kk = self.W.values * rs + self.Delta.values * uv * e[0]
        return Kk, self.b.values[k] + self.delta.values[k] * e2[0]


def hyper_batch_conv(layer, X, member_index, lam):
    return layer(X, member_index, lam)


def dropout(X, rate, mode, gen=None):
    """Inverted dropout with a per-row (or scalar) rate; identity in eval mode."""
    X = as_tensor(X)
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0.0) or np.any(rate > 0.95):
        raise ValueError("dropout rate must lie in [0, 0.95]")
    if mode == "eval" or not np.any(rate > 0):
        return X
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rate.ndim == 1:
        rate = rate.reshape((-1,) + (1,) * (X.ndim - 1))
    keep = 1.0 - rate
    mask = (gen.random(X.shape) < keep) / keep
    return X * mask


def tile_minibatch(X, K, lam=None):
    """Repeat a minibatch K times; row j belongs to member ``j // b``.

    ``lam`` may be ``(K, m)`` (one vector per member) or ``(K, b, m)`` (one per
    tiled row). Returns ``(X_tiled, member_index, lam_rows)``.
    """
    X = np.asarray(X)
    b = X.shape[0]
    Xt = np.concatenate([X] * K, axis=0)
    members = np.repeat(np.arange(K), b)
    lam_rows = None
    if lam is not None:
        lam = np.asarray(lam, dtype=np.float64)
        lam_rows = np.repeat(lam, b, axis=0) if lam.ndim == 2 else lam.reshape(K * b, -1)
    return Xt, members, lam_rows


def untile(Y, K):
    """Average the K member outputs for each original row (tensor or array)."""
    if isinstance(Y, Tensor):
        b = Y.shape[0] // K
        return ops.reshape(Y, (K, b) + Y.shape[1:]).mean(axis=0)
    Y = np.asarray(Y)
    return Y.reshape((K, Y.shape[0] // K) + Y.shape[1:]).mean(axis=0)


def split_members(Y, K):
    """Reshape a tiled output into (K, b, ...)."""
    if isinstance(Y, Tensor):
        return ops.reshape(Y, (K, Y.shape[0] // K) + Y.shape[1:])
    Y = np.asarray(Y)
    return Y.reshape((K, Y.shape[0] // K) + Y.shape[1:])
