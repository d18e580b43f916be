"""Differentiable layers implemented directly on float64 numpy arrays.

Every layer keeps its parameters in a ``params`` dict and accumulates
gradients of the same shapes in ``grads``.  ``forward`` caches whatever the
matching ``backward`` needs; ``backward`` consumes the gradient of the loss
with respect to the layer output and returns the gradient with respect to
the layer input while filling ``grads``.

Weight matrices use the (out_features, in_features) convention, so a dense
layer computes y = x @ W.T + b.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "softmax")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array (or of a single vector)."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected 1-D or 2-D input, got shape {x.shape}")


class Layer:
    """Base class holding the params/grads contract."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grads(self) -> None:
        for k in self.grads:
            self.grads[k][...] = 0.0


class Dense(Layer):
    """Fully connected layer with an optional pointwise activation.

    y = act(x @ W.T + b) with W of shape (out_dim, in_dim).
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        activation: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got in={in_dim} out={out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        if rng is None:
            W = np.zeros((out_dim, in_dim))
        else:
            # He scaling for relu, Xavier-like otherwise
            scale = np.sqrt(2.0 / in_dim) if activation == "relu" else np.sqrt(1.0 / in_dim)
            W = rng.normal(0.0, scale, size=(out_dim, in_dim))
        self.params = {"W": W.astype(np.float64), "b": np.zeros(out_dim)}
        self.grads = {"W": np.zeros_like(self.params["W"]), "b": np.zeros_like(self.params["b"])}
        self._cache: dict[str, np.ndarray | bool] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, squeeze = _as_batch(x)
        if xb.shape[1] != self.in_dim:
            raise ValueError(f"dense expects input dim {self.in_dim}, got {xb.shape[1]}")
        z = xb @ self.params["W"].T + self.params["b"]
        y = self._activate(z)
        self._cache = {"x": xb, "z": z, "y": y, "squeeze": squeeze}
        return y[0] if squeeze else y

    def _activate(self, z: np.ndarray) -> np.ndarray:
        a = self.activation
        if a == "identity":
            return z
        if a == "relu":
            return np.maximum(z, 0.0)
        if a == "tanh":
            return np.tanh(z)
        if a == "sigmoid":
            return sigmoid(z)
        return softmax(z)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x: np.ndarray = self._cache["x"]  # type: ignore[assignment]
        z: np.ndarray = self._cache["z"]  # type: ignore[assignment]
        y: np.ndarray = self._cache["y"]  # type: ignore[assignment]
        g, _ = _as_batch(grad_out)
        a = self.activation
        if a == "identity":
            dz = g
        elif a == "relu":
            dz = g * (z > 0.0)
        elif a == "tanh":
            dz = g * (1.0 - y * y)
        elif a == "sigmoid":
            dz = g * y * (1.0 - y)
        else:  # softmax rows: dz = y * (g - sum(g*y))
            dz = y * (g - np.sum(g * y, axis=-1, keepdims=True))
        self.grads["W"] += dz.T @ x
        self.grads["b"] += dz.sum(axis=0)
        dx = dz @ self.params["W"]
        return dx[0] if self._cache["squeeze"] else dx


class Conv1D(Layer):
    """Valid 1-D convolution over a (T, in_dim) token matrix.

    Kernel K has shape (n_filters, width, in_dim); output is
    (T - width + 1, n_filters).  Inputs shorter than the width are padded
    with zero rows up to the width so a single output step exists.
    """

    def __init__(
        self,
        width: int,
        n_filters: int,
        in_dim: int,
        activation: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if width < 1 or n_filters < 1:
            raise ValueError(f"conv width/filters must be >= 1, got {width}/{n_filters}")
        if activation not in ("identity", "relu", "tanh"):
            raise ValueError(f"unsupported conv activation {activation!r}")
        self.width = width
        self.n_filters = n_filters
        self.in_dim = in_dim
        self.activation = activation
        fan_in = width * in_dim
        if rng is None:
            K = np.zeros((n_filters, width, in_dim))
        else:
            K = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(n_filters, width, in_dim))
        self.params = {"K": K.astype(np.float64), "b": np.zeros(n_filters)}
        self.grads = {"K": np.zeros_like(self.params["K"]), "b": np.zeros_like(self.params["b"])}
        self._cache: dict[str, np.ndarray | int] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"conv expects (T, {self.in_dim}) input, got shape {x.shape}")
        t_orig = x.shape[0]
        if t_orig < self.width:
            x = np.vstack([x, np.zeros((self.width - t_orig, self.in_dim))])
        t_out = x.shape[0] - self.width + 1
        windows = np.stack([x[t : t + self.width] for t in range(t_out)])  # (T', w, d)
        z = np.tensordot(windows, self.params["K"], axes=([1, 2], [1, 2])) + self.params["b"]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(z)
        else:
            y = z
        self._cache = {"windows": windows, "z": z, "y": y, "t_orig": t_orig, "t_pad": x.shape[0]}
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        windows: np.ndarray = self._cache["windows"]  # type: ignore[assignment]
        z: np.ndarray = self._cache["z"]  # type: ignore[assignment]
        g = np.asarray(grad_out, dtype=np.float64)
        if self.activation == "relu":
            dz = g * (z > 0.0)
        elif self.activation == "tanh":
            y: np.ndarray = self._cache["y"]  # type: ignore[assignment]
            dz = g * (1.0 - y * y)
        else:
            dz = g
        self.grads["K"] += np.einsum("tf,twd->fwd", dz, windows)
        self.grads["b"] += dz.sum(axis=0)
        t_pad: int = self._cache["t_pad"]  # type: ignore[assignment]
        dx = np.zeros((t_pad, self.in_dim))
        dwin = np.einsum("tf,fwd->twd", dz, self.params["K"])
        for t in range(dwin.shape[0]):
            dx[t : t + self.width] += dwin[t]
        t_orig: int = self._cache["t_orig"]  # type: ignore[assignment]
        return dx[:t_orig]


class GRU(Layer):
    """Single gated recurrent layer processing one (T, in_dim) sequence.

    Update gate z, reset gate r, candidate state h~:
        z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)
        r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)
        h~_t = tanh(Wh x_t + Uh (r_t * h_{t-1}) + bh)
        h_t = (1 - z_t) * h_{t-1} + z_t * h~_t
    """

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        if in_dim < 1 or hidden_dim < 1:
            raise ValueError(f"gru dims must be >= 1, got in={in_dim} hidden={hidden_dim}")
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim

        def init(shape: tuple[int, int]) -> np.ndarray:
            if rng is None:
                return np.zeros(shape)
            return rng.normal(0.0, np.sqrt(1.0 / shape[1]), size=shape)

        self.params = {
            "Wz": init((hidden_dim, in_dim)),
            "Wr": init((hidden_dim, in_dim)),
            "Wh": init((hidden_dim, in_dim)),
            "Uz": init((hidden_dim, hidden_dim)),
            "Ur": init((hidden_dim, hidden_dim)),
            "Uh": init((hidden_dim, hidden_dim)),
            "bz": np.zeros(hidden_dim),
            "br": np.zeros(hidden_dim),
            "bh": np.zeros(hidden_dim),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache: dict[str, list[np.ndarray]] = {}

    def forward(self, seq: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[1] != self.in_dim:
            raise ValueError(f"gru expects (T, {self.in_dim}) input, got shape {seq.shape}")
        if seq.shape[0] == 0:
            raise ValueError("gru requires a non-empty sequence")
        h = np.zeros(self.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64).copy()
        p = self.params
        xs, h_prevs, zs, rs, cands, hs = [], [], [], [], [], []
        for x in seq:
            z = sigmoid(p["Wz"] @ x + p["Uz"] @ h + p["bz"])
            r = sigmoid(p["Wr"] @ x + p["Ur"] @ h + p["br"])
            cand = np.tanh(p["Wh"] @ x + p["Uh"] @ (r * h) + p["bh"])
            h_new = (1.0 - z) * h + z * cand
            xs.append(x.copy())
            h_prevs.append(h)
            zs.append(z)
            rs.append(r)
            cands.append(cand)
            hs.append(h_new)
            h = h_new
        self._cache = {"xs": xs, "h_prevs": h_prevs, "zs": zs, "rs": rs, "cands": cands}
        return np.stack(hs)

    def backward(self, grad_hs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backprop through time.

        grad_hs holds the loss gradient w.r.t. every hidden state (zeros for
        steps the loss does not touch).  Returns (grad_seq, grad_h0).
        """
        c = self._cache
        p = self.params
        T = len(c["xs"])
        g = np.asarray(grad_hs, dtype=np.float64)
        if g.shape != (T, self.hidden_dim):
            raise ValueError(f"grad_hs shape {g.shape} does not match ({T}, {self.hidden_dim})")
        dseq = np.zeros((T, self.in_dim))
        dh_next = np.zeros(self.hidden_dim)
        for t in range(T - 1, -1, -1):
            dh = g[t] + dh_next
            x, h_prev = c["xs"][t], c["h_prevs"][t]
            z, r, cand = c["zs"][t], c["rs"][t], c["cands"][t]
            dcand_pre = dh * z * (1.0 - cand * cand)
            dz_pre = dh * (cand - h_prev) * z * (1.0 - z)
            uh_dcand = p["Uh"].T @ dcand_pre
            dr_pre = uh_dcand * h_prev * r * (1.0 - r)
            self.grads["Wh"] += np.outer(dcand_pre, x)
            self.grads["Uh"] += np.outer(dcand_pre, r * h_prev)
            self.grads["bh"] += dcand_pre
            self.grads["Wz"] += np.outer(dz_pre, x)
            self.grads["Uz"] += np.outer(dz_pre, h_prev)
            self.grads["bz"] += dz_pre
            self.grads["Wr"] += np.outer(dr_pre, x)
            self.grads["Ur"] += np.outer(dr_pre, h_prev)
            self.grads["br"] += dr_pre
            dseq[t] = p["Wz"].T @ dz_pre + p["Wr"].T @ dr_pre + p["Wh"].T @ dcand_pre
            dh_next = (
                dh * (1.0 - z)
                + p["Uz"].T @ dz_pre
                + p["Ur"].T @ dr_pre
                + uh_dcand * r
            )
        return dseq, dh_next


class BatchNorm(Layer):
    """Feature-wise batch normalization with running statistics.

    Train mode normalizes by the batch mean/variance (biased) and updates the
    running statistics with momentum 0.9; inference mode normalizes by the
    running statistics.  Train mode needs a batch of at least 2 rows.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        if dim < 1:
            raise ValueError(f"batchnorm dim must be >= 1, got {dim}")
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.params = {"gamma": np.ones(dim), "beta": np.zeros(dim)}
        self.grads = {"gamma": np.zeros(dim), "beta": np.zeros(dim)}
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._cache: dict[str, np.ndarray | bool] = {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        xb, squeeze = _as_batch(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"batchnorm expects dim {self.dim}, got {xb.shape[1]}")
        if train:
            if xb.shape[0] < 2:
                raise ValueError("batchnorm train mode requires a batch of at least 2 rows")
            mean = xb.mean(axis=0)
            var = xb.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var
        else:
            mean = self.running_mean
            var = self.running_var
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (xb - mean) * ivar
        y = self.params["gamma"] * xhat + self.params["beta"]
        self._cache = {"xhat": xhat, "ivar": ivar, "xc": xb - mean, "train": train, "squeeze": squeeze}
        return y[0] if squeeze else y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g, _ = _as_batch(grad_out)
        xhat: np.ndarray = self._cache["xhat"]  # type: ignore[assignment]
        ivar: np.ndarray = self._cache["ivar"]  # type: ignore[assignment]
        self.grads["gamma"] += np.sum(g * xhat, axis=0)
        self.grads["beta"] += np.sum(g, axis=0)
        dxhat = g * self.params["gamma"]
        if self._cache["train"]:
            n = g.shape[0]
            # standard batchnorm input gradient with batch statistics
            dx = (ivar / n) * (
                n * dxhat - np.sum(dxhat, axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
        else:
            dx = dxhat * ivar
        return dx[0] if self._cache["squeeze"] else dx


class AttentionGate(Layer):
    """Learns one softmax weight per input block from the concatenated input.

    Blocks are fixed-dimension source vectors; absent blocks (None) are
    treated as zero vectors for the logit computation, masked to -inf before
    the softmax, and contribute zero vectors to the output.  The output is
    the concatenation of each block scaled by its weight, so the consumer
    keeps per-source alignment.
    """

    def __init__(self, block_dims: list[int] | tuple[int, ...], rng: np.random.Generator | None = None):
        super().__init__()
        if not block_dims or any(d < 1 for d in block_dims):
            raise ValueError(f"block dims must be a non-empty list of positive ints, got {block_dims}")
        self.block_dims = tuple(int(d) for d in block_dims)
        self.total_dim = sum(self.block_dims)
        n = len(self.block_dims)
        if rng is None:
            W = np.zeros((n, self.total_dim))
        else:
            W = rng.normal(0.0, np.sqrt(1.0 / self.total_dim), size=(n, self.total_dim))
        self.params = {"W": W, "b": np.zeros(n)}
        self.grads = {"W": np.zeros_like(W), "b": np.zeros(n)}
        self._offsets = np.concatenate([[0], np.cumsum(self.block_dims)])
        self._cache: dict[str, object] = {}

    def forward(self, blocks: list[np.ndarray | None]) -> np.ndarray:
        if len(blocks) != len(self.block_dims):
            raise ValueError(f"expected {len(self.block_dims)} blocks, got {len(blocks)}")
        present = [b is not None for b in blocks]
        if not any(present):
            raise ValueError("attention gate requires at least one present block")
        filled = []
        for i, b in enumerate(blocks):
            if b is None:
                filled.append(np.zeros(self.block_dims[i]))
            else:
                b = np.asarray(b, dtype=np.float64)
                if b.shape != (self.block_dims[i],):
                    raise ValueError(
                        f"block {i} has shape {b.shape}, expected ({self.block_dims[i]},)"
                    )
                filled.append(b)
        x_cat = np.concatenate(filled)
        logits = self.params["W"] @ x_cat + self.params["b"]
        idx = np.flatnonzero(present)
        shifted = logits[idx] - np.max(logits[idx])
        ex = np.exp(shifted)
        w_present = ex / ex.sum()
        weights = np.zeros(len(blocks))
        weights[idx] = w_present
        out = np.concatenate([weights[i] * filled[i] for i in range(len(blocks))])
        self._cache = {"x_cat": x_cat, "filled": filled, "weights": weights, "present_idx": idx}
        return out

    @property
    def last_weights(self) -> np.ndarray:
        """Softmax weights from the most recent forward (zeros at absent blocks)."""
        return np.asarray(self._cache["weights"])

    def backward(self, grad_out: np.ndarray) -> list[np.ndarray | None]:
        x_cat: np.ndarray = self._cache["x_cat"]  # type: ignore[assignment]
        filled: list[np.ndarray] = self._cache["filled"]  # type: ignore[assignment]
        weights: np.ndarray = self._cache["weights"]  # type: ignore[assignment]
        idx: np.ndarray = self._cache["present_idx"]  # type: ignore[assignment]
        g = np.asarray(grad_out, dtype=np.float64)
        n = len(self.block_dims)
        g_blocks = [g[self._offsets[i] : self._offsets[i + 1]] for i in range(n)]
        # gradient w.r.t. each softmax weight: dL/dw_i = g_i . block_i
        dweights = np.array([g_blocks[i] @ filled[i] for i in range(n)])
        # softmax backward restricted to present logits
        wp = weights[idx]
        dwp = dweights[idx]
        dlogits_p = wp * (dwp - np.dot(wp, dwp))
        dlogits = np.zeros(n)
        dlogits[idx] = dlogits_p
        self.grads["W"] += np.outer(dlogits, x_cat)
        self.grads["b"] += dlogits
        dx_cat = self.params["W"].T @ dlogits
        grads_blocks: list[np.ndarray | None] = []
        for i in range(n):
            if i in set(idx.tolist()):
                direct = weights[i] * g_blocks[i]
                through_logits = dx_cat[self._offsets[i] : self._offsets[i + 1]]
                grads_blocks.append(direct + through_logits)
            else:
                grads_blocks.append(None)
        return grads_blocks


def max_over_time(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool a (T, F) feature map over time; returns (pooled, argmax rows)."""
    arg = np.argmax(y, axis=0)
    return y[arg, np.arange(y.shape[1])], arg


def max_over_time_backward(grad_pooled: np.ndarray, arg: np.ndarray, t_len: int) -> np.ndarray:
    """Scatter pooled gradients back to the argmax time steps."""
    out = np.zeros((t_len, grad_pooled.shape[0]))
    out[arg, np.arange(grad_pooled.shape[0])] = grad_pooled
    return out
