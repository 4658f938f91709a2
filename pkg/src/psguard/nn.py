"""Minimal neural-network engine: exactly the layers the detectors need.

Every layer carries an explicit forward and backward pass over batched
row-major arrays shaped (batch, length, channels). float32 is the working
precision; construct layers with dtype=np.float64 when checking gradients
against finite differences.

Backward passes overwrite the layer's gradient fields on each call; one
forward/backward pair per optimizer step.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # the clip keeps exp() in range; saturation is exact at these magnitudes
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


class Conv1D:
    """Valid 1-D convolution, stride 1, bias per filter, optional ReLU."""

    def __init__(
        self,
        in_channels: int,
        filters: int,
        kernel_size: int = 3,
        relu: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.filters = filters
        self.relu = relu
        fan_in = kernel_size * in_channels
        # weight rows follow the flattened (kernel position, channel) layout
        self.w = glorot_uniform(rng, fan_in, filters, (fan_in, filters), dtype)
        self.b = np.zeros(filters, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        b, length, d = x.shape
        k = self.kernel_size
        if length < k:
            raise ShapeError(f"input length {length} shorter than kernel {k}")
        lp = length - k + 1
        # one full-length matmul per kernel position; avoids materializing
        # the (batch, length, k*d) window tensor
        flat = x.reshape(b * length, d)
        z = None
        for j in range(k):
            zj = (flat @ self.w[j * d : (j + 1) * d]).reshape(b, length, self.filters)
            z = zj[:, :lp].copy() if z is None else z + zj[:, j : j + lp]
        z += self.b
        if self.relu:
            self._mask = z > 0
            z *= self._mask
        self._x = x
        return z

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.relu:
            dout = dout * self._mask
        b, lp, f = dout.shape
        k, d = self.kernel_size, self.in_channels
        x = self._x
        flat_dout = dout.reshape(-1, f)
        self.dw = np.empty_like(self.w)
        dx = np.zeros_like(x, dtype=dout.dtype)
        for j in range(k):
            xj = x[:, j : j + lp, :].reshape(-1, d)
            self.dw[j * d : (j + 1) * d] = xj.T @ flat_dout
            dx[:, j : j + lp, :] += (flat_dout @ self.w[j * d : (j + 1) * d].T).reshape(b, lp, d)
        self.db = flat_dout.sum(axis=0)
        return dx


class MaxPool1D:
    """Window max per channel; gradient routes to the first max position."""

    def __init__(self, pool: int = 3, stride: int = 3):
        self.pool = pool
        self.stride = stride

    def params(self):
        return []

    def grads(self):
        return []

    @staticmethod
    def output_length(length: int, pool: int, stride: int) -> int:
        return (length - pool) // stride + 1

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        b, length, f = x.shape
        if length < self.pool:
            raise ShapeError(f"input length {length} shorter than pool {self.pool}")
        win = np.lib.stride_tricks.sliding_window_view(x, self.pool, axis=1)[:, :: self.stride]
        self._win = win  # strided view; argmax deferred to backward
        self._in_shape = x.shape
        return win.max(axis=3)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, lp, f = dout.shape
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        starts = np.arange(lp) * self.stride
        pos = starts[None, :, None] + self._win.argmax(axis=3)
        bidx = np.arange(b)[:, None, None]
        fidx = np.arange(f)[None, None, :]
        np.add.at(dx, (bidx, pos, fidx), dout)
        return dx


class GlobalMaxPool:
    """Max over all positions, one value per channel."""

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        if x.shape[1] < 1:
            raise ShapeError("global max pool needs at least one position")
        self._x = x  # argmax deferred to backward
        return x.max(axis=1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, f = dout.shape
        dx = np.zeros(self._x.shape, dtype=dout.dtype)
        bidx = np.arange(b)[:, None]
        fidx = np.arange(f)[None, :]
        dx[bidx, self._x.argmax(axis=1), fidx] = dout
        return dx


class Dropout:
    """Inverted dropout: survivors scale by 1/(1-p); inference is identity."""

    def __init__(self, p: float):
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        if not training or self.p == 0:
            self._mask = None
            return x
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype)
        self._mask = keep / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        return dout * self._mask


class Embedding:
    """Trainable row-gather. Row 0 is the padding row: zero and frozen.

    An optional per-position overlay replaces looked-up rows with externally
    computed vectors (used for subword-composed out-of-vocabulary tokens);
    overlay positions receive no table gradient.
    """

    def __init__(self, table: np.ndarray, padding_idx: int = 0):
        self.table = table
        self.padding_idx = padding_idx
        self.dtable = np.zeros_like(table)

    def params(self):
        return [self.table]

    def grads(self):
        return [self.dtable]

    def forward(
        self,
        ids: np.ndarray,
        overlay_mask: Optional[np.ndarray] = None,
        overlay_values: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= len(self.table):
            raise IndexError("embedding index out of range")
        out = self.table[ids]
        if overlay_mask is not None and overlay_mask.any():
            out[overlay_mask] = overlay_values[overlay_mask].astype(out.dtype)
        self._ids = ids
        self._overlay_mask = overlay_mask
        return out

    def backward(self, dout: np.ndarray) -> None:
        self.dtable = np.zeros_like(self.table)
        learned = self._ids != self.padding_idx
        if self._overlay_mask is not None:
            learned &= ~self._overlay_mask
        np.add.at(self.dtable, self._ids[learned], dout[learned])
        return None


class Dense:
    """Affine layer with an optional relu or sigmoid activation."""

    def __init__(
        self,
        in_dim: int,
        units: int,
        activation: Optional[str] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if activation not in (None, "relu", "sigmoid"):
            raise ValueError(f"unsupported activation: {activation}")
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.w = glorot_uniform(rng, in_dim, units, (in_dim, units), dtype)
        self.b = np.zeros(units, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        z = x @ self.w + self.b
        if self.activation == "relu":
            self._cache = z > 0
            z = np.where(self._cache, z, 0)
        elif self.activation == "sigmoid":
            z = sigmoid(z)
            self._cache = z
        self._x = x
        return z

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            dz = dout * self._cache
        elif self.activation == "sigmoid":
            y = self._cache
            dz = dout * y * (1.0 - y)
        else:
            dz = dout
        self.dw = self._x.T @ dz
        self.db = dz.sum(axis=0)
        return dz @ self.w.T


class BiLSTM:
    """Bidirectional LSTM returning the two directions' final hidden states.

    Input and recurrent dropout masks are sampled once per sequence and
    reused across timesteps (variational dropout); both are identity at
    inference. Gate layout in the fused weight matrices is input, forget,
    candidate, output; the forget-gate bias starts at 1.
    """

    def __init__(
        self,
        in_dim: int,
        units: int,
        dropout: float = 0.0,
        recurrent_dropout: float = 0.0,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.units = units
        self.dropout = dropout
        self.recurrent_dropout = recurrent_dropout
        self.dtype = dtype

        def direction():
            w = glorot_uniform(rng, in_dim, units, (in_dim, 4 * units), dtype)
            u = glorot_uniform(rng, units, units, (units, 4 * units), dtype)
            b = np.zeros(4 * units, dtype=dtype)
            b[units : 2 * units] = 1.0
            return {"w": w, "u": u, "b": b}

        self.fwd = direction()
        self.bwd = direction()
        self.dfwd = {k: np.zeros_like(v) for k, v in self.fwd.items()}
        self.dbwd = {k: np.zeros_like(v) for k, v in self.bwd.items()}

    def params(self):
        return [self.fwd["w"], self.fwd["u"], self.fwd["b"], self.bwd["w"], self.bwd["u"], self.bwd["b"]]

    def grads(self):
        return [self.dfwd["w"], self.dfwd["u"], self.dfwd["b"], self.dbwd["w"], self.dbwd["u"], self.dbwd["b"]]

    def _run_direction(self, x, p, training, rng):
        b, length, _ = x.shape
        h_units = self.units
        if training and self.dropout > 0:
            mi = (rng.random((b, self.in_dim)) >= self.dropout).astype(x.dtype) / (1 - self.dropout)
        else:
            mi = np.ones((b, self.in_dim), dtype=x.dtype)
        if training and self.recurrent_dropout > 0:
            mh = (rng.random((b, h_units)) >= self.recurrent_dropout).astype(x.dtype) / (
                1 - self.recurrent_dropout
            )
        else:
            mh = np.ones((b, h_units), dtype=x.dtype)

        hs = np.zeros((length + 1, b, h_units), dtype=x.dtype)
        cs = np.zeros((length + 1, b, h_units), dtype=x.dtype)
        gates = np.zeros((length, b, 4 * h_units), dtype=x.dtype)
        xm = x * mi[:, None, :]
        # the input contribution for all timesteps in one matmul
        zx = (xm.reshape(b * length, -1) @ p["w"]).reshape(b, length, 4 * h_units)
        for t in range(length):
            z = zx[:, t] + (hs[t] * mh) @ p["u"] + p["b"]
            gt = gates[t]
            gt[:, : 2 * h_units] = sigmoid(z[:, : 2 * h_units])
            gt[:, 2 * h_units : 3 * h_units] = np.tanh(z[:, 2 * h_units : 3 * h_units])
            gt[:, 3 * h_units :] = sigmoid(z[:, 3 * h_units :])
            i = gt[:, :h_units]
            f = gt[:, h_units : 2 * h_units]
            g = gt[:, 2 * h_units : 3 * h_units]
            o = gt[:, 3 * h_units :]
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
        cache = {"xm": xm, "mi": mi, "mh": mh, "hs": hs, "cs": cs, "gates": gates}
        return hs[length], cache

    def _backprop_direction(self, dh_final, p, dp, cache):
        xm, mi, mh = cache["xm"], cache["mi"], cache["mh"]
        hs, cs, gates = cache["hs"], cache["cs"], cache["gates"]
        length = xm.shape[1]
        h_units = self.units
        dw = np.zeros_like(p["w"])
        du = np.zeros_like(p["u"])
        db = np.zeros_like(p["b"])
        dx = np.zeros_like(xm)
        dh = dh_final.astype(xm.dtype)
        dc = np.zeros_like(dh)
        for t in range(length - 1, -1, -1):
            i = gates[t][:, :h_units]
            f = gates[t][:, h_units : 2 * h_units]
            g = gates[t][:, 2 * h_units : 3 * h_units]
            o = gates[t][:, 3 * h_units :]
            tc = np.tanh(cs[t + 1])
            do = dh * tc
            dct = dh * o * (1 - tc * tc) + dc
            di = dct * g
            dg = dct * i
            df = dct * cs[t]
            dc = dct * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
                axis=1,
            )
            dw += xm[:, t].T @ dz
            du += (hs[t] * mh).T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ p["w"].T
            dh = (dz @ p["u"].T) * mh
        dp["w"][...] = dw
        dp["u"][...] = du
        dp["b"][...] = db
        return dx * mi[:, None, :]

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        h_fwd, self._cache_fwd = self._run_direction(x, self.fwd, training, rng)
        h_bwd, self._cache_bwd = self._run_direction(x[:, ::-1], self.bwd, training, rng)
        return np.concatenate([h_fwd, h_bwd], axis=1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h_units = self.units
        dx_fwd = self._backprop_direction(dout[:, :h_units], self.fwd, self.dfwd, self._cache_fwd)
        dx_bwd = self._backprop_direction(dout[:, h_units:], self.bwd, self.dbwd, self._cache_bwd)
        return dx_fwd + dx_bwd[:, ::-1]


def weighted_bce(
    pred: np.ndarray, label: np.ndarray, weight: np.ndarray | float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weighted binary cross-entropy and its gradient in pred.

    Predictions clamp to [eps, 1-eps]; the gradient is zero where the clamp
    is active.
    """
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -weight * (label * np.log(p) + (1.0 - label) * np.log1p(-p))
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)
    dpred = np.where(inside, weight * (p - label) / (p * (1.0 - p)), 0.0)
    return loss, dpred


class Adam:
    """Bias-corrected Adam over a fixed parameter list, updated in place."""

    def __init__(self, params: list[np.ndarray], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(
                    f"non-finite gradient in parameter {i} "
                    f"(shape {g.shape}, nan={int(np.isnan(g).sum())}, inf={int(np.isinf(g).sum())})"
                )
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
