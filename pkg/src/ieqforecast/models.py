"""LSTM, GRU and CNN-LSTM forecasters with hand-written backpropagation through time.

All forward functions accept a single window (T, F) or a batch (B, T, F) and
return next-step predictions for the three sensor channels together with a
cache that :func:`model_backward` consumes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import RejectedInputError
from .numerics import conv1d_backward, conv1d_forward

FAMILIES = ("lstm", "gru", "cnn_lstm")
PARAM_ORDERING_VERSION = "ieq-params-1"
CHECKPOINT_MAGIC = b"IEQC1\n"


def _sigmoid(x):
    # tanh form never overflows and is a single ufunc call
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_features: int = 7
    hidden_size: int = 64
    conv_filters: int = 32
    conv_kernel: int = 3
    output_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise RejectedInputError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.hidden_size < 1 or self.input_features < 1:
            raise RejectedInputError("hidden_size and input_features must be >= 1")
        if self.output_size != 3:
            raise RejectedInputError("output_size must be 3")
        if self.family == "cnn_lstm" and (self.conv_kernel < 1 or self.conv_filters < 1):
            raise RejectedInputError("conv_kernel and conv_filters must be >= 1")


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Parameter names and shapes in flattening order."""
    f, h, o = spec.input_features, spec.hidden_size, spec.output_size
    if spec.family == "lstm":
        return {"W_x": (f, 4 * h), "U": (h, 4 * h), "b": (4 * h,), "W_out": (h, o), "b_out": (o,)}
    if spec.family == "gru":
        return {"W_x": (f, 3 * h), "U_zr": (h, 2 * h), "U_n": (h, h), "b": (3 * h,),
                "W_out": (h, o), "b_out": (o,)}
    k, c = spec.conv_kernel, spec.conv_filters
    return {"conv_kernel": (k, f, c), "conv_bias": (c,), "W_x": (c, 4 * h), "U": (h, 4 * h),
            "b": (4 * h,), "W_out": (h, o), "b_out": (o,)}


def recurrent_param_count(spec: ModelSpec) -> int:
    gates = 3 if spec.family == "gru" else 4
    f = spec.conv_filters if spec.family == "cnn_lstm" else spec.input_features
    h = spec.hidden_size
    return gates * (h * f + h * h + h)


class ModelParams:
    """Named parameter arrays for one architecture, flattenable in a fixed order.

    LSTM gate blocks are laid out (input, forget, output, candidate) along the
    last axis of ``W_x``, ``U`` and ``b``; GRU blocks are (update, reset,
    candidate), with the candidate's recurrent weights held apart in ``U_n``.
    """

    def __init__(self, spec: ModelSpec, arrays: dict[str, np.ndarray]):
        shapes = param_shapes(spec)
        if set(arrays) != set(shapes):
            raise RejectedInputError(f"expected parameters {sorted(shapes)}, got {sorted(arrays)}")
        self.spec = spec
        self.arrays = {}
        for name, shape in shapes.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise RejectedInputError(f"parameter {name} has shape {a.shape}, expected {shape}")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in param_shapes(self.spec)])

    @classmethod
    def unflatten(cls, spec: ModelSpec, vector) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        shapes = param_shapes(spec)
        total = sum(int(np.prod(s)) for s in shapes.values())
        if vector.shape != (total,):
            raise RejectedInputError(f"parameter vector has shape {vector.shape}, expected ({total},)")
        arrays, pos = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            arrays[name] = vector[pos : pos + n].reshape(shape).copy()
            pos += n
        return cls(spec, arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal_blocks(rng, h, blocks):
    out = []
    for _ in range(blocks):
        q, r = np.linalg.qr(rng.standard_normal((h, h)))
        out.append(q * np.sign(np.diag(r)))
    return np.concatenate(out, axis=1)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator, identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


def init_params(spec: ModelSpec) -> ModelParams:
    rng = make_rng(spec.seed)
    f, h, o = spec.input_features, spec.hidden_size, spec.output_size
    arrays = {}
    if spec.family == "cnn_lstm":
        k, c = spec.conv_kernel, spec.conv_filters
        arrays["conv_kernel"] = _glorot(rng, (k, f, c), k * f, k * c)
        arrays["conv_bias"] = np.zeros(c)
        f = c
    gates = 3 if spec.family == "gru" else 4
    arrays["W_x"] = _glorot(rng, (f, gates * h), f, h)
    if spec.family == "gru":
        u = _orthogonal_blocks(rng, h, 3)
        arrays["U_zr"], arrays["U_n"] = u[:, : 2 * h], u[:, 2 * h :].copy()
        arrays["b"] = np.zeros(3 * h)
    else:
        arrays["U"] = _orthogonal_blocks(rng, h, 4)
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget gate
        arrays["b"] = b
    arrays["W_out"] = _glorot(rng, (h, o), h, o)
    arrays["b_out"] = np.zeros(o)
    return ModelParams(spec, arrays)


# --------------------------------------------------------------------------
# recurrent cores: (B, T, F) -> final hidden state, plus caches
# --------------------------------------------------------------------------

def lstm_sequence_forward(x, W_x, U, b, h0=None, c0=None):
    bsz, steps, _ = x.shape
    hdim = U.shape[0]
    xw = x @ W_x + b
    h = np.zeros((bsz, hdim)) if h0 is None else h0
    c = np.zeros((bsz, hdim)) if c0 is None else c0
    steps_cache = []
    for t in range(steps):
        a = xw[:, t] + h @ U
        sig = _sigmoid(a[:, : 3 * hdim])
        i, f, o = sig[:, :hdim], sig[:, hdim : 2 * hdim], sig[:, 2 * hdim :]
        g = np.tanh(a[:, 3 * hdim :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps_cache.append((h, c, i, f, o, g, tc))
        h, c = h_new, c_new
    return h, (x, steps_cache)


def lstm_sequence_backward(cache, dh, W_x, U):
    """Gradients for :func:`lstm_sequence_forward` given ``dh`` on the final hidden state."""
    x, steps_cache = cache
    bsz, steps, fdim = x.shape
    hdim = U.shape[0]
    dxw = np.empty((bsz, steps, 4 * hdim))
    dU = np.zeros_like(U)
    dc = np.zeros((bsz, hdim))
    for t in range(steps - 1, -1, -1):
        h_prev, c_prev, i, f, o, g, tc = steps_cache[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        da = dxw[:, t]
        da[:, :hdim] = dc * g * i * (1.0 - i)
        da[:, hdim : 2 * hdim] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * hdim : 3 * hdim] = dh * tc * o * (1.0 - o)
        da[:, 3 * hdim :] = dc * i * (1.0 - g * g)
        dU += h_prev.T @ da
        dh = da @ U.T
        dc = dc * f
    flat = dxw.reshape(-1, 4 * hdim)
    dW_x = x.reshape(-1, fdim).T @ flat
    db = flat.sum(axis=0)
    dx = dxw @ W_x.T
    return dx, dW_x, dU, db, dh, dc


def gru_sequence_forward(x, W_x, U_zr, U_n, b, h0=None):
    bsz, steps, _ = x.shape
    hdim = U_n.shape[0]
    xw = x @ W_x + b
    h = np.zeros((bsz, hdim)) if h0 is None else h0
    steps_cache = []
    for t in range(steps):
        xt = xw[:, t]
        zr = _sigmoid(xt[:, : 2 * hdim] + h @ U_zr)
        z, r = zr[:, :hdim], zr[:, hdim:]
        rh = r * h
        n = np.tanh(xt[:, 2 * hdim :] + rh @ U_n)
        steps_cache.append((h, z, r, rh, n))
        h = h + z * (n - h)
    return h, (x, steps_cache)


def gru_sequence_backward(cache, dh, W_x, U_zr, U_n):
    x, steps_cache = cache
    bsz, steps, fdim = x.shape
    hdim = U_n.shape[0]
    dxw = np.empty((bsz, steps, 3 * hdim))
    dU_zr = np.zeros_like(U_zr)
    dU_n = np.zeros_like(U_n)
    for t in range(steps - 1, -1, -1):
        h_prev, z, r, rh, n = steps_cache[t]
        da = dxw[:, t]
        da_n = dh * z * (1.0 - n * n)
        da[:, 2 * hdim :] = da_n
        dU_n += rh.T @ da_n
        drh = da_n @ U_n.T
        da[:, :hdim] = dh * (n - h_prev) * z * (1.0 - z)
        da[:, hdim : 2 * hdim] = drh * h_prev * r * (1.0 - r)
        da_zr = da[:, : 2 * hdim]
        dU_zr += h_prev.T @ da_zr
        dh = dh * (1.0 - z) + drh * r + da_zr @ U_zr.T
    flat = dxw.reshape(-1, 3 * hdim)
    dW_x = x.reshape(-1, fdim).T @ flat
    db = flat.sum(axis=0)
    dx = dxw @ W_x.T
    return dx, dW_x, dU_zr, dU_n, db, dh


# --------------------------------------------------------------------------
# full models
# --------------------------------------------------------------------------

@dataclass
class ForwardCache:
    family: str
    n_params: int
    single: bool
    h_last: np.ndarray
    core: tuple
    conv: tuple | None = None


def _prepare_input(params: ModelParams, window) -> tuple[np.ndarray, bool]:
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != params.spec.input_features:
        raise RejectedInputError(
            f"expected windows of shape (T, {params.spec.input_features}), got {np.shape(window)}"
        )
    if not np.isfinite(x).all():
        raise RejectedInputError("input window contains non-finite values")
    return x, single


def _head(params, h, single):
    pred = h @ params["W_out"] + params["b_out"]
    return pred[0] if single else pred


def lstm_forward(params: ModelParams, window):
    x, single = _prepare_input(params, window)
    h, core = lstm_sequence_forward(x, params["W_x"], params["U"], params["b"])
    return _head(params, h, single), ForwardCache("lstm", params.size, single, h, core)


def gru_forward(params: ModelParams, window):
    x, single = _prepare_input(params, window)
    h, core = gru_sequence_forward(x, params["W_x"], params["U_zr"], params["U_n"], params["b"])
    return _head(params, h, single), ForwardCache("gru", params.size, single, h, core)


def cnn_lstm_forward(params: ModelParams, window):
    x, single = _prepare_input(params, window)
    k = params.spec.conv_kernel
    if x.shape[1] < k:
        raise RejectedInputError(f"window length {x.shape[1]} shorter than conv kernel {k}")
    pre = conv1d_forward(x, params["conv_kernel"], params["conv_bias"])
    seq = np.maximum(pre, 0.0)
    h, core = lstm_sequence_forward(seq, params["W_x"], params["U"], params["b"])
    return _head(params, h, single), ForwardCache("cnn_lstm", params.size, single, h, core, (x, pre))


_FORWARD = {"lstm": lstm_forward, "gru": gru_forward, "cnn_lstm": cnn_lstm_forward}


def forward(params: ModelParams, window):
    """Dispatch on ``params.spec.family``."""
    return _FORWARD[params.spec.family](params, window)


def predict(params: ModelParams, inputs, batch_size: int = 1024) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    out = [forward(params, inputs[i : i + batch_size])[0] for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.spec.output_size))


def model_backward(params: ModelParams, cache: ForwardCache, prediction_grad) -> np.ndarray:
    """Flat gradient of ``sum(prediction * prediction_grad)`` w.r.t. every parameter."""
    if cache.family != params.spec.family or cache.n_params != params.size:
        raise RejectedInputError("forward cache does not belong to these parameters")
    g = np.asarray(prediction_grad, dtype=np.float64)
    if cache.single:
        g = g[None]
    if g.shape != (cache.h_last.shape[0], params.spec.output_size):
        raise RejectedInputError(f"prediction gradient has shape {np.shape(prediction_grad)}")

    grads = {"W_out": cache.h_last.T @ g, "b_out": g.sum(axis=0)}
    dh = g @ params["W_out"].T
    if cache.family == "gru":
        _, grads["W_x"], grads["U_zr"], grads["U_n"], grads["b"], _ = gru_sequence_backward(
            cache.core, dh, params["W_x"], params["U_zr"], params["U_n"])
    else:
        dseq, grads["W_x"], grads["U"], grads["b"], _, _ = lstm_sequence_backward(
            cache.core, dh, params["W_x"], params["U"])
        if cache.family == "cnn_lstm":
            x, pre = cache.conv
            _, grads["conv_kernel"], grads["conv_bias"] = conv1d_backward(
                x, params["conv_kernel"], dseq * (pre > 0))
    return np.concatenate([grads[n].ravel() for n in param_shapes(params.spec)])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """JSON header line followed by the little-endian float64 parameter vector."""
    header = {
        "format": "ieq-checkpoint-1",
        "spec": asdict(params.spec),
        "ordering": PARAM_ORDERING_VERSION,
        "parameters": [[n, list(s)] for n, s in param_shapes(params.spec).items()],
        "n_params": params.size,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise RejectedInputError(f"{path}: not an ieq checkpoint")
    end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(raw[len(CHECKPOINT_MAGIC) : end])
    if header.get("ordering") != PARAM_ORDERING_VERSION:
        raise RejectedInputError(f"{path}: unsupported parameter ordering {header.get('ordering')!r}")
    spec = ModelSpec(**header["spec"])
    vector = np.frombuffer(raw[end + 1 :], dtype="<f8").astype(np.float64)
    return ModelParams.unflatten(spec, vector), header
