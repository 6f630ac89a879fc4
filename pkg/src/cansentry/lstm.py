"""From-scratch LSTM binary classifier.

Architecture: one LSTM layer over the input window, inverted dropout on the
final hidden state, a fully connected ReLU layer of the same width, and a
single sigmoid output neuron. Training is mean binary cross-entropy via
backpropagation through time with the Adam optimizer; everything is plain
float64 numpy and fully deterministic under the configured seed.

Cell equations (logistic sigma, elementwise products):

    i = sigma(Wi [x; h] + bi)      f = sigma(Wf [x; h] + bf)
    o = sigma(Wo [x; h] + bo)      g = tanh(Wg [x; h] + bg)
    c' = f * c + i * g             h' = o * tanh(c')
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    DimensionError,
    ToolkitError,
    TrainingError,
)

PROB_EPS = 1e-12  # probability clamp keeping the loss finite

_GATE_NAMES = ("input", "forget", "output", "candidate")
_PARAM_NAMES = ("w_gates", "b_gates", "fc_w", "fc_b", "out_w", "out_b")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LstmModel:
    """All detector parameters.

    Gate weights are stored stacked as w_gates (4H, D+H) and b_gates (4H,)
    in the fixed row order input, forget, output, candidate; the per-gate
    views below slice into that storage.
    """

    hidden_size: int
    input_size: int
    w_gates: np.ndarray
    b_gates: np.ndarray
    fc_w: np.ndarray  # (H, H)
    fc_b: np.ndarray  # (H,)
    out_w: np.ndarray  # (H,)
    out_b: np.ndarray  # (1,)

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(weights, bias) view for one of input/forget/output/candidate."""
        k = _GATE_NAMES.index(name)
        h = self.hidden_size
        return self.w_gates[k * h : (k + 1) * h], self.b_gates[k * h : (k + 1) * h]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def copy(self) -> "LstmModel":
        return LstmModel(
            self.hidden_size,
            self.input_size,
            *(getattr(self, n).copy() for n in _PARAM_NAMES),
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.params().values())


@dataclass
class TrainConfig:
    hidden_size: int = 50
    epochs: int = 50
    batch_size: int = 128
    dropout_p: float = 0.5
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ToolkitError("dropout_p must lie in [0, 1)")
        if self.batch_size < 1 or self.hidden_size < 1 or self.epochs < 0:
            raise ToolkitError("batch_size/hidden_size must be >= 1, epochs >= 0")
        if self.learning_rate <= 0:
            raise ToolkitError("learning_rate must be positive")


@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)


def init_model(config: TrainConfig, input_size: int, rng: np.random.Generator) -> LstmModel:
    """Glorot-uniform weights per block, zero biases."""
    h, d = config.hidden_size, input_size

    def glorot(fan_in, fan_out, shape):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    w_gates = np.vstack([glorot(d + h, h, (h, d + h)) for _ in _GATE_NAMES])
    return LstmModel(
        hidden_size=h,
        input_size=d,
        w_gates=w_gates,
        b_gates=np.zeros(4 * h),
        fc_w=glorot(h, h, (h, h)),
        fc_b=np.zeros(h),
        out_w=glorot(h, 1, (h,)),
        out_b=np.zeros(1),
    )


def lstm_step(
    x: np.ndarray, h: np.ndarray, c: np.ndarray, model: LstmModel
) -> tuple[np.ndarray, np.ndarray]:
    """One cell update for a single timestep; accepts (D,) or (B, D) inputs."""
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(h)
    c2 = np.atleast_2d(c)
    hs = model.hidden_size
    z = np.concatenate([x2, h2], axis=1) @ model.w_gates.T + model.b_gates
    i = _sigmoid(z[:, :hs])
    f = _sigmoid(z[:, hs : 2 * hs])
    o = _sigmoid(z[:, 2 * hs : 3 * hs])
    g = np.tanh(z[:, 3 * hs :])
    c_new = f * c2 + i * g
    h_new = o * np.tanh(c_new)
    if squeeze:
        return h_new[0], c_new[0]
    return h_new, c_new


def forward_batch(
    model: LstmModel,
    inputs: np.ndarray,
    dropout_mask: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Probabilities for a batch of windows, shape (B, T, D) -> (B,).

    The dropout mask (inverted, already scaled by 1/(1-p)) applies to the
    final hidden state only; pass None at inference time. The three sigmoid
    gates are contiguous in the stacked layout, so one activation call
    covers them.
    """
    b, t, d = inputs.shape
    if d != model.input_size:
        raise ToolkitError(f"window width {d} != model input size {model.input_size}")
    hs = model.hidden_size
    dtype = model.w_gates.dtype
    wx = model.w_gates[:, :d]
    wh = model.w_gates[:, d:]
    x_proj = inputs.reshape(b * t, d) @ wx.T
    x_proj = x_proj.reshape(b, t, 4 * hs) + model.b_gates

    h = np.zeros((b, hs), dtype=dtype)
    c = np.zeros((b, hs), dtype=dtype)
    cache = None
    if want_cache:
        cache = {
            "gates": np.empty((b, t, 4 * hs), dtype=dtype),
            "tanh_c": np.empty((b, t, hs), dtype=dtype),
            "c_prev": np.empty((b, t, hs), dtype=dtype),
            "h_prev": np.empty((b, t, hs), dtype=dtype),
        }
    for step in range(t):
        z = x_proj[:, step] + h @ wh.T
        z[:, : 3 * hs] = _sigmoid(z[:, : 3 * hs])
        np.tanh(z[:, 3 * hs :], out=z[:, 3 * hs :])
        i = z[:, :hs]
        f = z[:, hs : 2 * hs]
        o = z[:, 2 * hs : 3 * hs]
        g = z[:, 3 * hs :]
        if want_cache:
            cache["gates"][:, step] = z
            cache["c_prev"][:, step] = c
            cache["h_prev"][:, step] = h
        c = f * c + i * g
        tanh_c = np.tanh(c)
        if want_cache:
            cache["tanh_c"][:, step] = tanh_c
        h = o * tanh_c

    hd = h if dropout_mask is None else h * dropout_mask
    a = hd @ model.fc_w.T + model.fc_b
    relu = np.maximum(a, 0.0)
    logit = relu @ model.out_w + model.out_b[0]
    p = _sigmoid(logit)
    if want_cache:
        cache.update(inputs=inputs, mask=dropout_mask, hd=hd, a=a, relu=relu, p=p)
    return p, cache


def forward(
    window: np.ndarray, model: LstmModel, dropout_mask: np.ndarray | None = None
) -> float:
    """Probability for a single (T, D) window."""
    mask = None if dropout_mask is None else np.atleast_2d(dropout_mask)
    p, _ = forward_batch(model, window[None, :, :], mask)
    return float(p[0])


def bce_loss(y, p, eps: float = PROB_EPS) -> float:
    """Mean binary cross-entropy with probability clamped to [eps, 1-eps]."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    losses = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(np.mean(losses))


def backward(model: LstmModel, cache: dict, y: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the mean BCE loss for a cached forward pass."""
    inputs = cache["inputs"]
    b, t, d = inputs.shape
    hs = model.hidden_size
    dtype = model.w_gates.dtype
    wh = model.w_gates[:, d:]
    y = np.asarray(y, dtype=dtype)

    dlogit = (cache["p"] - y) / b  # sigmoid + BCE collapse
    g_out_w = cache["relu"].T @ dlogit
    g_out_b = np.array([dlogit.sum()], dtype=dtype)
    d_relu = np.outer(dlogit, model.out_w)
    d_a = d_relu * (cache["a"] > 0)
    g_fc_w = d_a.T @ cache["hd"]
    g_fc_b = d_a.sum(axis=0)
    dh = d_a @ model.fc_w
    if cache["mask"] is not None:
        dh = dh * cache["mask"]

    gates = cache["gates"]
    d_z = np.empty((b, t, 4 * hs), dtype=dtype)
    dc = np.zeros((b, hs), dtype=dtype)
    for step in range(t - 1, -1, -1):
        z = gates[:, step]
        i = z[:, :hs]
        f = z[:, hs : 2 * hs]
        o = z[:, 2 * hs : 3 * hs]
        g = z[:, 3 * hs :]
        tanh_c = cache["tanh_c"][:, step]
        d_o = dh * tanh_c
        d_c = dh * o * (1.0 - tanh_c * tanh_c) + dc
        d_i = d_c * g
        d_g = d_c * i
        d_f = d_c * cache["c_prev"][:, step]
        dc = d_c * f
        out = d_z[:, step]
        out[:, :hs] = d_i * i * (1.0 - i)
        out[:, hs : 2 * hs] = d_f * f * (1.0 - f)
        out[:, 2 * hs : 3 * hs] = d_o * o * (1.0 - o)
        out[:, 3 * hs :] = d_g * (1.0 - g * g)
        dh = out @ wh

    flat_z = d_z.reshape(b * t, 4 * hs)
    g_wx = flat_z.T @ inputs.reshape(b * t, d)
    g_wh = flat_z.T @ cache["h_prev"].reshape(b * t, hs)
    return {
        "w_gates": np.concatenate([g_wx, g_wh], axis=1),
        "b_gates": d_z.sum(axis=(0, 1)),
        "fc_w": g_fc_w,
        "fc_b": g_fc_b,
        "out_w": g_out_w,
        "out_b": g_out_b,
    }


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, model: LstmModel) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in model.params().items()},
            v={k: np.zeros_like(a) for k, a in model.params().items()},
        )


def adam_step(
    model: LstmModel,
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    config: TrainConfig,
) -> LstmModel:
    """Standard Adam update with bias correction; t counts from 1."""
    if t < 1:
        raise ToolkitError("Adam step counter starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, param in model.params().items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        param -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return model


def train(
    train_inputs: np.ndarray,
    train_labels: np.ndarray,
    config: TrainConfig,
    dtype=np.float64,
) -> tuple[LstmModel, TrainHistory]:
    """Train on (N, T, D) windows with (N,) binary labels.

    Glorot init, per-epoch seeded shuffle, fresh dropout masks per batch;
    raises TrainingError naming the epoch if the loss goes non-finite.
    Deterministic under (data, config, dtype). `dtype` selects the working
    precision; the initialization random stream is dtype-independent.
    """
    n = len(train_inputs)
    if n == 0:
        raise ToolkitError("empty training set")
    inputs = np.asarray(train_inputs, dtype=dtype)
    labels = np.asarray(train_labels, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    model = init_model(config, inputs.shape[2], rng)
    if dtype is not np.float64:
        for name, param in model.params().items():
            setattr(model, name, param.astype(dtype))
    state = AdamState.zeros_like(model)
    history = TrainHistory()
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, config.batch_size):
            batch_idx = order[lo : lo + config.batch_size]
            xb = inputs[batch_idx]
            yb = labels[batch_idx]
            mask = None
            if config.dropout_p > 0:
                keep = rng.random((len(batch_idx), config.hidden_size)) >= config.dropout_p
                mask = (keep / (1.0 - config.dropout_p)).astype(dtype)
            p, cache = forward_batch(model, xb, mask, want_cache=True)
            batch_loss = bce_loss(yb, p)
            if not math.isfinite(batch_loss):
                raise TrainingError(epoch, "training loss became non-finite")
            loss_sum += batch_loss * len(batch_idx)
            grads = backward(model, cache, yb)
            step += 1
            adam_step(model, grads, state, step, config)
        if not model.all_finite():
            raise TrainingError(epoch, "parameters became non-finite")
        history.epoch_losses.append(loss_sum / n)
        history.epoch_seconds.append(time.perf_counter() - started)
    return model, history


def predict_proba(model: LstmModel, inputs: np.ndarray, batch: int = 2048) -> np.ndarray:
    """Probabilities for (N, T, D) windows, dropout disabled."""
    out = np.empty(len(inputs))
    for lo in range(0, len(inputs), batch):
        p, _ = forward_batch(model, np.ascontiguousarray(inputs[lo : lo + batch]))
        out[lo : lo + batch] = p
    return out


def predict(model: LstmModel, window: np.ndarray, threshold: float = 0.5) -> int:
    """1 when the window's probability reaches the threshold (ties attack)."""
    return int(forward(window, model) >= threshold)


def predict_stream(
    model: LstmModel, values: np.ndarray, T: int = 10, threshold: float = 0.5
) -> np.ndarray:
    """Per-row labels for a normalized feature stream, after T-row warm-up.

    Returns len(values) - T + 1 labels; label k belongs to row k + T - 1.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    if len(values) < T:
        raise ToolkitError(f"stream has {len(values)} rows, needs >= {T}")
    view = sliding_window_view(values, (T, values.shape[1]))[:, 0]
    return (predict_proba(model, view) >= threshold).astype(np.int8)


# ---------------------------------------------------------------------------
# Checkpoint: ASCII header, then little-endian float64 blocks in the order
# input/forget/output/candidate gate (weights then bias), fc, out.
# ---------------------------------------------------------------------------

_MAGIC = "cansentry-lstm-checkpoint v1"


def _block_order(h: int, d: int) -> list[tuple[str, tuple[int, ...]]]:
    blocks = []
    for gate in _GATE_NAMES:
        blocks.append((f"gate_{gate}_w", (h, d + h)))
        blocks.append((f"gate_{gate}_b", (h,)))
    blocks += [("fc_w", (h, h)), ("fc_b", (h,)), ("out_w", (h,)), ("out_b", (1,))]
    return blocks


def save_checkpoint(
    model: LstmModel,
    config: TrainConfig | None = None,
    norm_mins: np.ndarray | None = None,
    norm_maxs: np.ndarray | None = None,
) -> bytes:
    """Serialize the model (plus optional config echo and normalizer)."""
    h, d = model.hidden_size, model.input_size
    n_doubles = sum(int(np.prod(shape)) for _, shape in _block_order(h, d))
    lines = [
        _MAGIC,
        f"hidden_size = {h}",
        f"input_size = {d}",
        f"param_doubles = {n_doubles}",
    ]
    if config is not None:
        for key in ("epochs", "batch_size", "dropout_p", "learning_rate",
                    "adam_beta1", "adam_beta2", "adam_eps", "threshold", "seed"):
            lines.append(f"cfg.{key} = {getattr(config, key)}")
    if norm_mins is not None and norm_maxs is not None:
        lines.append("norm_mins = " + ",".join(repr(float(v)) for v in norm_mins))
        lines.append("norm_maxs = " + ",".join(repr(float(v)) for v in norm_maxs))
    lines.append("END-HEADER")
    header = ("\n".join(lines) + "\n").encode("ascii")

    parts = []
    for gate in _GATE_NAMES:
        w, bias = model.gate(gate)
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(bias, dtype="<f8").tobytes())
    for name in ("fc_w", "fc_b", "out_w", "out_b"):
        parts.append(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())
    return header + b"".join(parts)


def load_checkpoint(
    data: bytes,
    expect_hidden: int | None = None,
    expect_input: int | None = None,
) -> tuple[LstmModel, dict]:
    """Parse checkpoint bytes back into a model and its header metadata."""
    marker = b"END-HEADER\n"
    pos = data.find(marker)
    if pos < 0:
        raise CheckpointCorruptError("missing END-HEADER marker")
    try:
        header_lines = data[:pos].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointCorruptError(f"undecodable header: {exc}") from None
    if not header_lines or header_lines[0] != _MAGIC:
        raise CheckpointVersionError(
            f"unrecognized checkpoint magic {header_lines[0] if header_lines else ''!r}"
        )
    meta: dict = {}
    for line in header_lines[1:]:
        if " = " not in line:
            raise CheckpointCorruptError(f"malformed header line {line!r}")
        key, value = line.split(" = ", 1)
        meta[key] = value
    try:
        h = int(meta["hidden_size"])
        d = int(meta["input_size"])
        n_doubles = int(meta["param_doubles"])
    except (KeyError, ValueError) as exc:
        raise CheckpointCorruptError(f"bad header dimensions: {exc}") from None
    if expect_hidden is not None and h != expect_hidden:
        raise DimensionError(f"checkpoint hidden size {h}, expected {expect_hidden}")
    if expect_input is not None and d != expect_input:
        raise DimensionError(f"checkpoint input size {d}, expected {expect_input}")

    payload = data[pos + len(marker):]
    expected_bytes = n_doubles * 8
    if len(payload) != expected_bytes:
        raise CheckpointCorruptError(
            f"payload is {len(payload)} bytes, header promises {expected_bytes}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    blocks = {}
    offset = 0
    for name, shape in _block_order(h, d):
        size = int(np.prod(shape))
        blocks[name] = flat[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    model = LstmModel(
        hidden_size=h,
        input_size=d,
        w_gates=np.vstack([blocks[f"gate_{g}_w"] for g in _GATE_NAMES]),
        b_gates=np.concatenate([blocks[f"gate_{g}_b"] for g in _GATE_NAMES]),
        fc_w=blocks["fc_w"],
        fc_b=blocks["fc_b"],
        out_w=blocks["out_w"],
        out_b=blocks["out_b"],
    )
    if "norm_mins" in meta and "norm_maxs" in meta:
        meta["norm_mins"] = np.array([float(v) for v in meta["norm_mins"].split(",")])
        meta["norm_maxs"] = np.array([float(v) for v in meta["norm_maxs"].split(",")])
    return model, meta


def save_checkpoint_file(path, model, config=None, norm_mins=None, norm_maxs=None) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model, config, norm_mins, norm_maxs))


def load_checkpoint_file(path, expect_hidden=None, expect_input=None):
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read(), expect_hidden, expect_input)
