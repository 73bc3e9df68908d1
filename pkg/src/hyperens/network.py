"""Feed-forward networks assembled from a :class:`ModelSpec`.

Two flavors share one builder: ``plain`` networks use fixed hyperparameters,
``hyper_batch`` networks use hyper-batch layers and take one λ row (and one
member index) per input row. Hyperparameters reach the network by name:

* ``l2_w{i}`` / ``l2_w`` and ``l2_b{i}`` / ``l2_b``: L2 strengths of parametrized layer ``i``
* ``dropout``: rate of the dropout layer placed before the output layer
* ``label_smoothing``: consumed by the loss, not the network
"""

import numpy as np

from . import layers as L
from . import objectives
from .diffcore import ops
from .diffcore.rng import make_rng
from .diffcore.tensor import Tensor, as_tensor

KINDS = ("plain", "hyper_batch")
PREDICT_CHUNK = 1024


class Network:
    def __init__(self, spec, schema, input_shape, n_out, kind="plain", K=1, rng=None):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        if kind == "plain" and K != 1:
            raise ValueError("plain networks have a single member")
        rng = rng if rng is not None else make_rng(0)
        self.spec, self.schema, self.kind, self.K = spec, schema, kind, K
        self.input_shape = tuple(input_shape)
        self.n_out = n_out
        init_gen = rng.child("init").generator()
        rank1_gen = rng.child("rank1").generator()
        emb_gen = rng.child("embed").generator()

        self.stages = []  # (op, payload)
        self.param_layers = []
        shape = self.input_shape
        for i, cfg in enumerate(spec.layers):
            t = cfg["type"]
            if t == "dense":
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: dense needs flat input, add a flatten layer")
                layer = self._dense(shape[0], cfg["units"], init_gen, rank1_gen, emb_gen)
                self._add_param(layer)
                self.stages.append(("act", None))
                shape = (cfg["units"],)
            elif t == "conv":
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv needs (h, w, c) input")
                size, filters = cfg.get("size", 3), cfg["filters"]
                padding, stride = cfg.get("padding", "valid"), cfg.get("stride", 1)
                layer = self._conv(size, shape[2], filters, stride, padding,
                                   init_gen, rank1_gen, emb_gen)
                self._add_param(layer)
                self.stages.append(("act", None))
                h, w = shape[:2]
                if padding == "valid":
                    h, w = (h - size) // stride + 1, (w - size) // stride + 1
                else:
                    h, w = -(-h // stride), -(-w // stride)
                shape = (h, w, filters)
            elif t == "maxpool":
                size = cfg.get("size", 2)
                self.stages.append(("pool", size))
                shape = (shape[0] // size, shape[1] // size, shape[2])
            elif t == "flatten":
                self.stages.append(("flatten", None))
                shape = (int(np.prod(shape)),)
        if len(shape) != 1:
            self.stages.append(("flatten", None))
            shape = (int(np.prod(shape)),)
        self.dropout_index = schema.names.index("dropout") if "dropout" in schema.names else None
        if self.dropout_index is not None:
            self.stages.append(("dropout", None))
        self._add_param(self._dense(shape[0], n_out, init_gen, rank1_gen, emb_gen))
        self._l2_map = [self._l2_indices(i) for i in range(len(self.param_layers))]

    def _dense(self, r, s, gen, rank1_gen, emb_gen):
        if self.kind == "plain":
            return L.Dense(r, s, gen)
        sp = self.spec
        return L.HyperBatchDense(r, s, self.K, self.schema, gen, sp.rank1_init, sp.embedding,
                                 sp.couple_uv_to_rs, sp.regularize_rank1, rank1_gen, emb_gen)

    def _conv(self, size, c_in, c_out, stride, padding, gen, rank1_gen, emb_gen):
        if self.kind == "plain":
            return L.Conv(size, c_in, c_out, gen, stride, padding)
        sp = self.spec
        return L.HyperBatchConv(size, c_in, c_out, self.K, self.schema, gen, sp.rank1_init,
                                sp.embedding, sp.couple_uv_to_rs, sp.regularize_rank1,
                                stride, padding, rank1_gen, emb_gen)

    def _add_param(self, layer):
        self.stages.append(("param", len(self.param_layers)))
        self.param_layers.append(layer)

    def _l2_indices(self, i):
        names = self.schema.names

        def find(*cands):
            for c in cands:
                if c in names:
                    return names.index(c)
            return None

        w = find(f"l2_w{i}", "l2_w", "l2")
        b = find(f"l2_b{i}", "l2_b")
        has_l2 = "l2" in self.schema.kinds
        if has_l2 and w is None:
            raise ValueError(f"no L2 hyperparameter mapped to layer {i}")
        return w, b

    def params(self):
        out = {}
        for i, layer in enumerate(self.param_layers):
            for name, p in layer.params().items():
                out[f"L{i}.{name}"] = p
        return out

    def param_count(self):
        return sum(p.values.size for p in self.params().values())

    def state_arrays(self):
        return {name: p.values.copy() for name, p in self.params().items()}

    def load_state(self, arrays):
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.values.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.values.shape}")
            p.values[...] = arrays[name]

    def forward(self, X, lam, member_index=None, mode="eval", gen=None):
        """Return output rows (N, n_out).

        ``lam`` is one vector (plain) or one row per input (hyper_batch,
        array or tensor). ``member_index`` is required for hyper_batch.
        """
        h = as_tensor(X)
        lam_v = lam.values if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
        if self.kind == "hyper_batch" and member_index is None:
            raise ValueError("hyper_batch forward needs member indices")
        act = ops.relu if self.spec.activation == "relu" else ops.tanh
        for op, payload in self.stages:
            if op == "param":
                h = self.param_layers[payload](h, member_index, lam)
            elif op == "act":
                h = act(h)
            elif op == "pool":
                h = ops.maxpool2d(h, payload)
            elif op == "flatten":
                h = ops.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            elif op == "dropout":
                h = L.dropout(h, lam_v[..., self.dropout_index], mode, gen)
        return h

    def l2_strengths(self, lam_v, i):
        w, b = self._l2_map[i]
        nu_w = None if w is None else lam_v[..., w]
        nu_b = None if b is None else lam_v[..., b]
        return nu_w, nu_b

    def regularizer(self, lam, member_index=None):
        lam_v = lam.values if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
        total = None
        for i, layer in enumerate(self.param_layers):
            nu_w, nu_b = self.l2_strengths(lam_v, i)
            if nu_w is None:
                continue
            if self.kind == "plain":
                term = objectives.l2_reg_plain(layer, nu_w, nu_b)
            else:
                term = objectives.l2_reg_vectorized(layer, member_index, lam, nu_w, nu_b)
            total = term if total is None else total + term
        return total if total is not None else Tensor(0.0)

    def predict_members(self, X, lams):
        """Eval-mode outputs for each member at a fixed λ per member.

        ``lams`` is (K, m) for hyper_batch or (m,) for plain. Returns
        (K, n, n_out) raw outputs.
        """
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if self.kind == "plain":
            out = [self.forward(X[i:i + PREDICT_CHUNK], lams).values
                   for i in range(0, n, PREDICT_CHUNK)]
            return np.concatenate(out, axis=0)[None] if out else np.zeros((1, 0, self.n_out))
        lams = np.asarray(lams, dtype=np.float64).reshape(self.K, -1)
        chunks = []
        step = max(1, PREDICT_CHUNK // self.K)
        for i in range(0, n, step):
            Xt, members, lam_rows = L.tile_minibatch(X[i:i + step], self.K, lams)
            out = self.forward(Xt, lam_rows, members).values
            chunks.append(L.split_members(out, self.K))
        if not chunks:
            return np.zeros((self.K, 0, self.n_out))
        return np.concatenate(chunks, axis=1)


def softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
