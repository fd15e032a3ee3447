"""Sequential user model: fused interaction embeddings, a stacked
bidirectional LSTM over the user's recent history, attention against the
candidate question, and a fully-connected head producing a correctness
probability.

The math lives in batch-first internals (``forward_batch`` /
``backward_batch``) operating on (batch, length, dim) arrays; the
per-example operations are thin batch-of-one wrappers, so gradient checks
exercise exactly the code the training loop runs.

Gate order inside LSTM preactivations is [input, forget, candidate,
output]; the forget slice of each bias is initialized to 1 elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ColdStartError, MaskError, ShapeError
from .numerics import DTYPE_TRAIN, masked_softmax, sigmoid, tanh

ATTENTION_KINDS = ("additive", "dot", "none")
ENCODER_KINDS = ("bilstm", "lstm", "fc")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults give the full-size model:
    128-d embeddings, three stacked 128-unit bidirectional layers, a 256-d
    additive attention space, and a 512-256-128 head."""

    question_vocab: int
    d_embed: int = 128
    d_lstm: int = 128
    lstm_layers: int = 3
    d_attn: int = 256
    head_dims: tuple[int, ...] = (512, 256, 128)
    attention_kind: str = "additive"
    encoder_kind: str = "bilstm"
    window: int = 50

    def __post_init__(self):
        for name in ("question_vocab", "d_embed", "d_lstm", "lstm_layers",
                     "d_attn", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(d < 1 for d in self.head_dims):
            raise ValueError("head widths must be >= 1")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        object.__setattr__(self, "head_dims", tuple(self.head_dims))

    @property
    def unknown_question(self) -> int:
        """Reserved embedding row for question ids unseen at training time."""
        return self.question_vocab

    @property
    def d_encoder_out(self) -> int:
        return 2 * self.d_lstm

    def to_dict(self) -> dict:
        return {
            "question_vocab": self.question_vocab,
            "d_embed": self.d_embed,
            "d_lstm": self.d_lstm,
            "lstm_layers": self.lstm_layers,
            "d_attn": self.d_attn,
            "head_dims": list(self.head_dims),
            "attention_kind": self.attention_kind,
            "encoder_kind": self.encoder_kind,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["head_dims"] = tuple(d.get("head_dims", ()))
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Stable name -> shape map for every learnable tensor.

    Order matters: it fixes checkpoint layout and the iteration order of
    optimizers, so it must be a pure function of the config.
    """
    e, h, a = config.d_embed, config.d_lstm, config.d_attn
    shapes: dict[str, tuple[int, ...]] = {
        "embed.question": (config.question_vocab + 1, e),
        "embed.response": (2, e),
    }
    if config.encoder_kind in ("bilstm", "lstm"):
        directions = ("fwd", "bwd") if config.encoder_kind == "bilstm" else ("fwd",)
        for layer in range(config.lstm_layers):
            d_in = e if layer == 0 else 2 * h
            for direction in directions:
                prefix = f"enc.l{layer}.{direction}"
                shapes[f"{prefix}.w_x"] = (d_in, 4 * h)
                shapes[f"{prefix}.w_h"] = (h, 4 * h)
                shapes[f"{prefix}.b"] = (4 * h,)
    else:
        shapes["enc.fc.w"] = (e, 2 * h)
        shapes["enc.fc.b"] = (2 * h,)
    if config.attention_kind in ("additive", "dot"):
        shapes["attn.w_a"] = (2 * h, a)
        shapes["attn.u_a"] = (e, a)
    if config.attention_kind == "additive":
        shapes["attn.v_a"] = (a,)
    d_prev = 2 * h + e
    for i, width in enumerate(config.head_dims):
        shapes[f"head.{i}.w"] = (d_prev, width)
        shapes[f"head.{i}.b"] = (width,)
        d_prev = width
    out = len(config.head_dims)
    shapes[f"head.{out}.w"] = (d_prev, 1)
    shapes[f"head.{out}.b"] = (1,)
    return shapes


class Parameters:
    """All learnable tensors, keyed by the names in ``parameter_shapes``."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters({k: v.astype(dtype) for k, v in self.tensors.items()})

    def validate_shapes(self, config: ModelConfig) -> None:
        expected = parameter_shapes(config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"tensor set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(
                    f"{name} has shape {self.tensors[name].shape}, expected {shape}"
                )


def zero_gradients(params: Parameters) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


# ---------------------------------------------------------------------------
# batched internals
# ---------------------------------------------------------------------------


class BatchTrace:
    """Per-batch activations kept for the backward pass and for reports.

    ``alpha`` rows are probability distributions over valid history steps;
    ``prob`` is in (0, 1). Everything else is only present when the forward
    ran with ``cache=True``.
    """

    __slots__ = (
        "questions", "responses", "mask", "targets", "fused", "layer_caches",
        "z", "q_target", "zw", "qu", "s_tanh", "scores", "alpha", "user_vec",
        "head_inputs", "logit", "prob", "cached",
    )

    def __init__(self):
        self.layer_caches = []
        self.cached = False


def _lstm_scan(x, w_x, w_h, b, mask, reverse, keep_cache):
    """Run one LSTM direction over (B, L, d_in) inputs.

    Hidden and cell states are forced to zero at padded steps, which keeps
    the reverse direction from dragging garbage from the padded tail into
    valid positions. Returns the (B, L, H) hidden sequence plus the caches
    the backward pass needs.
    """
    bsz, length, _ = x.shape
    hdim = w_h.shape[0]
    pre = x.reshape(bsz * length, -1) @ w_x
    pre = pre.reshape(bsz, length, 4 * hdim) + b
    h = np.zeros((bsz, hdim), dtype=x.dtype)
    c = np.zeros((bsz, hdim), dtype=x.dtype)
    h_seq = np.empty((bsz, length, hdim), dtype=x.dtype)
    gates = np.empty((bsz, length, 4 * hdim), dtype=x.dtype) if keep_cache else None
    c_seq = np.empty((bsz, length, hdim), dtype=x.dtype) if keep_cache else None
    tanh_c = np.empty((bsz, length, hdim), dtype=x.dtype) if keep_cache else None
    order = range(length - 1, -1, -1) if reverse else range(length)
    for t in order:
        a = pre[:, t] + h @ w_h
        gi = sigmoid(a[:, :hdim])
        gf = sigmoid(a[:, hdim:2 * hdim])
        gg = tanh(a[:, 2 * hdim:3 * hdim])
        go = sigmoid(a[:, 3 * hdim:])
        c_raw = gf * c + gi * gg
        tc = tanh(c_raw)
        m = mask[:, t:t + 1]
        h = go * tc * m
        c = c_raw * m
        h_seq[:, t] = h
        if keep_cache:
            gates[:, t, :hdim] = gi
            gates[:, t, hdim:2 * hdim] = gf
            gates[:, t, 2 * hdim:3 * hdim] = gg
            gates[:, t, 3 * hdim:] = go
            c_seq[:, t] = c
            tanh_c[:, t] = tc
    cache = {"x": x, "h": h_seq, "gates": gates, "c": c_seq,
             "tanh_c": tanh_c, "reverse": reverse} if keep_cache else None
    return h_seq, cache


def _lstm_scan_backward(dh_seq, cache, w_x, w_h, mask):
    """Backpropagate through one ``_lstm_scan`` direction.

    ``dh_seq`` holds the gradients arriving at every emitted hidden state
    (from the layer above and from attention). Gradients at padded steps
    are zeroed the same way the forward zeroed the states, so they
    contribute nothing anywhere.
    """
    x, h_seq = cache["x"], cache["h"]
    gates, c_seq, tanh_c = cache["gates"], cache["c"], cache["tanh_c"]
    reverse = cache["reverse"]
    bsz, length, hdim = h_seq.shape
    d_a = np.zeros((bsz, length, 4 * hdim), dtype=x.dtype)
    dh_rec = np.zeros((bsz, hdim), dtype=x.dtype)
    dc_rec = np.zeros((bsz, hdim), dtype=x.dtype)
    steps = list(range(length - 1, -1, -1) if reverse else range(length))
    for pos in range(length - 1, -1, -1):
        t = steps[pos]
        prev = steps[pos - 1] if pos > 0 else None
        m = mask[:, t:t + 1]
        gi = gates[:, t, :hdim]
        gf = gates[:, t, hdim:2 * hdim]
        gg = gates[:, t, 2 * hdim:3 * hdim]
        go = gates[:, t, 3 * hdim:]
        tc = tanh_c[:, t]
        c_prev = c_seq[:, prev] if prev is not None else 0.0
        dh_total = (dh_seq[:, t] + dh_rec) * m
        dc_raw = dc_rec * m + dh_total * go * (1.0 - tc * tc)
        slot = d_a[:, t]
        slot[:, :hdim] = dc_raw * gg * gi * (1.0 - gi)
        slot[:, hdim:2 * hdim] = dc_raw * c_prev * gf * (1.0 - gf)
        slot[:, 2 * hdim:3 * hdim] = dc_raw * gi * (1.0 - gg * gg)
        slot[:, 3 * hdim:] = dh_total * tc * go * (1.0 - go)
        dh_rec = slot @ w_h.T
        dc_rec = dc_raw * gf
    # the recurrent weight sees the previous step's hidden state (in this
    # direction's processing order); one shifted gemm covers all steps
    h_prev_seq = np.zeros_like(h_seq)
    if length > 1:
        if reverse:
            h_prev_seq[:, :-1] = h_seq[:, 1:]
        else:
            h_prev_seq[:, 1:] = h_seq[:, :-1]
    flat_a = d_a.reshape(bsz * length, 4 * hdim)
    dw_h = h_prev_seq.reshape(bsz * length, hdim).T @ flat_a
    dw_x = x.reshape(bsz * length, -1).T @ flat_a
    dx = (flat_a @ w_x.T).reshape(x.shape)
    db = d_a.sum(axis=(0, 1))
    return dx, dw_x, dw_h, db


def _encode_batch(params, config, fused, mask, keep_cache):
    """Stacked encoder over fused inputs (B, L, d_embed) -> (B, L, 2*d_lstm)."""
    layer_caches = []
    if config.encoder_kind == "fc":
        pre_mask = tanh(fused @ params["enc.fc.w"] + params["enc.fc.b"])
        z = pre_mask * mask[:, :, None]
        if keep_cache:
            layer_caches.append({"kind": "fc", "x": fused, "z": z})
        return z, layer_caches
    x = fused
    for layer in range(config.lstm_layers):
        h_f, cache_f = _lstm_scan(
            x, params[f"enc.l{layer}.fwd.w_x"], params[f"enc.l{layer}.fwd.w_h"],
            params[f"enc.l{layer}.fwd.b"], mask, reverse=False,
            keep_cache=keep_cache)
        if config.encoder_kind == "bilstm":
            h_b, cache_b = _lstm_scan(
                x, params[f"enc.l{layer}.bwd.w_x"], params[f"enc.l{layer}.bwd.w_h"],
                params[f"enc.l{layer}.bwd.b"], mask, reverse=True,
                keep_cache=keep_cache)
            z = np.concatenate([h_f, h_b], axis=2)
        else:
            h_b, cache_b = None, None
            z = np.concatenate([h_f, np.zeros_like(h_f)], axis=2)
        if keep_cache:
            layer_caches.append({"kind": config.encoder_kind,
                                 "fwd": cache_f, "bwd": cache_b})
        x = z
    return x, layer_caches


def _encode_batch_backward(params, config, trace, dz):
    """Gradient of ``_encode_batch``; returns (d_fused, grads-by-name)."""
    grads: dict[str, np.ndarray] = {}
    mask = trace.mask
    if config.encoder_kind == "fc":
        cache = trace.layer_caches[0]
        z, x = cache["z"], cache["x"]
        dpre = dz * (1.0 - z * z) * mask[:, :, None]
        bsz, length, _ = x.shape
        flat = dpre.reshape(bsz * length, -1)
        grads["enc.fc.w"] = x.reshape(bsz * length, -1).T @ flat
        grads["enc.fc.b"] = flat.sum(axis=0)
        return (flat @ params["enc.fc.w"].T).reshape(x.shape), grads
    hdim = config.d_lstm
    for layer in range(config.lstm_layers - 1, -1, -1):
        cache = trace.layer_caches[layer]
        dx_f, dw_x, dw_h, db = _lstm_scan_backward(
            np.ascontiguousarray(dz[:, :, :hdim]), cache["fwd"],
            params[f"enc.l{layer}.fwd.w_x"], params[f"enc.l{layer}.fwd.w_h"], mask)
        grads[f"enc.l{layer}.fwd.w_x"] = dw_x
        grads[f"enc.l{layer}.fwd.w_h"] = dw_h
        grads[f"enc.l{layer}.fwd.b"] = db
        dx = dx_f
        if config.encoder_kind == "bilstm":
            dx_b, dw_x, dw_h, db = _lstm_scan_backward(
                np.ascontiguousarray(dz[:, :, hdim:]), cache["bwd"],
                params[f"enc.l{layer}.bwd.w_x"], params[f"enc.l{layer}.bwd.w_h"],
                mask)
            grads[f"enc.l{layer}.bwd.w_x"] = dw_x
            grads[f"enc.l{layer}.bwd.w_h"] = dw_h
            grads[f"enc.l{layer}.bwd.b"] = db
            dx = dx + dx_b
        dz = dx
    return dz, grads


def _attend_batch(params, config, z, mask, q_target, keep_cache, trace):
    """Attention over encoder outputs, conditioned on the target question.

    additive: score_k = v_a . tanh(z_k W_a + q U_a)
    dot:      score_k = (z_k W_a) . (q U_a)
    none:     uniform over valid steps (plain mean of z)
    """
    kind = config.attention_kind
    bool_mask = mask > 0
    if kind == "none":
        counts = mask.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise MaskError("attention mask has no valid steps")
        alpha = mask / counts
        scores = None
    else:
        zw = z @ params["attn.w_a"]
        qu = q_target @ params["attn.u_a"]
        if kind == "additive":
            s_tanh = tanh(zw + qu[:, None, :])
            scores = s_tanh @ params["attn.v_a"]
        else:
            s_tanh = None
            scores = np.einsum("bla,ba->bl", zw, qu)
        alpha = masked_softmax(scores, bool_mask).astype(z.dtype)
        if keep_cache:
            trace.zw, trace.qu, trace.s_tanh = zw, qu, s_tanh
    user_vec = np.einsum("bl,bld->bd", alpha, z)
    return user_vec, alpha, scores


def _attend_batch_backward(params, config, trace, du):
    """Gradient of ``_attend_batch``; returns (dz, dq_target, grads)."""
    grads: dict[str, np.ndarray] = {}
    z, alpha, mask = trace.z, trace.alpha, trace.mask
    dz = alpha[:, :, None] * du[:, None, :]
    if config.attention_kind == "none":
        return dz, np.zeros_like(trace.q_target), grads
    d_alpha = np.einsum("bd,bld->bl", du, z)
    inner = (d_alpha * alpha).sum(axis=1, keepdims=True)
    d_scores = alpha * (d_alpha - inner)
    if config.attention_kind == "additive":
        s_tanh = trace.s_tanh
        grads["attn.v_a"] = np.einsum("bl,bla->a", d_scores, s_tanh)
        d_zw = d_scores[:, :, None] * params["attn.v_a"] * (1.0 - s_tanh * s_tanh)
        d_qu = d_zw.sum(axis=1)
    else:
        d_zw = d_scores[:, :, None] * trace.qu[:, None, :]
        d_qu = np.einsum("bl,bla->ba", d_scores, trace.zw)
    bsz, length, _ = z.shape
    flat_dzw = d_zw.reshape(bsz * length, -1)
    grads["attn.w_a"] = z.reshape(bsz * length, -1).T @ flat_dzw
    dz += (flat_dzw @ params["attn.w_a"].T).reshape(z.shape)
    grads["attn.u_a"] = trace.q_target.T @ d_qu
    dq_target = d_qu @ params["attn.u_a"].T
    return dz, dq_target, grads


def _head_batch(params, config, user_vec, q_target, keep_cache, trace):
    """Concat head: tanh hidden layers, then affine -> sigmoid scalar."""
    h = np.concatenate([user_vec, q_target], axis=1)
    inputs = [h]
    n_hidden = len(config.head_dims)
    for i in range(n_hidden):
        h = tanh(h @ params[f"head.{i}.w"] + params[f"head.{i}.b"])
        inputs.append(h)
    logit = (h @ params[f"head.{n_hidden}.w"] + params[f"head.{n_hidden}.b"])[:, 0]
    prob = sigmoid(logit)
    if keep_cache:
        trace.head_inputs = inputs
    return logit, prob


def _head_batch_backward(params, config, trace, d_logit):
    """Gradient of ``_head_batch``; returns (du, dq_target, grads)."""
    grads: dict[str, np.ndarray] = {}
    inputs = trace.head_inputs
    n_hidden = len(config.head_dims)
    d_out = d_logit[:, None]
    grads[f"head.{n_hidden}.w"] = inputs[-1].T @ d_out
    grads[f"head.{n_hidden}.b"] = d_out.sum(axis=0)
    dh = d_out @ params[f"head.{n_hidden}.w"].T
    for i in range(n_hidden - 1, -1, -1):
        act = inputs[i + 1]
        d_pre = dh * (1.0 - act * act)
        grads[f"head.{i}.w"] = inputs[i].T @ d_pre
        grads[f"head.{i}.b"] = d_pre.sum(axis=0)
        dh = d_pre @ params[f"head.{i}.w"].T
    d2h = 2 * config.d_lstm
    return dh[:, :d2h], dh[:, d2h:], grads


def forward_batch(params: Parameters, config: ModelConfig, questions, responses,
                  mask, targets, cache: bool = False) -> BatchTrace:
    """Full forward pass over a padded batch.

    ``questions``/``responses`` are (B, L) int arrays of embedding indices,
    ``mask`` a (B, L) 0/1 array marking real steps, ``targets`` the (B,)
    candidate question indices. Every row must have at least one valid step.
    """
    questions = np.asarray(questions)
    responses = np.asarray(responses)
    targets = np.asarray(targets)
    dtype = params.dtype
    mask = np.asarray(mask, dtype=dtype)
    if questions.ndim != 2 or questions.shape != responses.shape \
            or mask.shape != questions.shape:
        raise ShapeError("questions, responses, and mask must share a (B, L) shape")
    if np.any(questions > config.question_vocab) or np.any(questions < 0):
        raise IndexError("question index outside the embedding table")
    if np.any((responses != 0) & (responses != 1)):
        raise IndexError("response bits must be 0 or 1")
    trace = BatchTrace()
    trace.questions, trace.responses = questions, responses
    trace.mask, trace.targets = mask, targets
    trace.cached = cache

    fused = params["embed.question"][questions] * params["embed.response"][responses]
    fused = fused * mask[:, :, None]
    q_target = params["embed.question"][targets]
    trace.fused, trace.q_target = fused, q_target

    z, layer_caches = _encode_batch(params, config, fused, mask, cache)
    trace.z, trace.layer_caches = z, layer_caches

    user_vec, alpha, scores = _attend_batch(params, config, z, mask, q_target,
                                            cache, trace)
    trace.user_vec, trace.alpha, trace.scores = user_vec, alpha, scores

    logit, prob = _head_batch(params, config, user_vec, q_target, cache, trace)
    trace.logit, trace.prob = logit, prob
    return trace


def backward_batch(params: Parameters, config: ModelConfig, trace: BatchTrace,
                   labels, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Exact gradients of the summed (scaled) cross-entropy over the batch.

    ``scale`` is 1 for a per-example gradient and 1/B for a mean-reduced
    batch. Embedding rows never touched by the batch get zero gradient.
    """
    if not trace.cached:
        raise ValueError("forward pass ran without cache=True; no activations "
                         "to backpropagate through")
    labels = np.asarray(labels, dtype=trace.prob.dtype)
    d_logit = (trace.prob - labels) * trace.prob.dtype.type(scale)

    du, dq_target, grads = _head_batch_backward(params, config, trace, d_logit)
    dz, dq_attn, attn_grads = _attend_batch_backward(params, config, trace, du)
    grads.update(attn_grads)
    dq_target = dq_target + dq_attn

    d_fused, enc_grads = _encode_batch_backward(params, config, trace, dz)
    grads.update(enc_grads)

    # fused = (Q[q] * R[r]) * mask, and d_fused already carries the mask zeros
    q_rows = params["embed.question"][trace.questions]
    r_rows = params["embed.response"][trace.responses]
    m3 = trace.mask[:, :, None]
    d_q_rows = (d_fused * r_rows * m3).reshape(-1, config.d_embed)
    d_r_rows = (d_fused * q_rows * m3).reshape(-1, config.d_embed)

    d_q_table = np.zeros_like(params["embed.question"])
    np.add.at(d_q_table, trace.questions.reshape(-1), d_q_rows)
    np.add.at(d_q_table, trace.targets, dq_target)
    d_r_table = np.zeros_like(params["embed.response"])
    np.add.at(d_r_table, trace.responses.reshape(-1), d_r_rows)
    grads["embed.question"] = d_q_table
    grads["embed.response"] = d_r_table

    full = zero_gradients(params)
    full.update(grads)
    return full


# ---------------------------------------------------------------------------
# per-example surface
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """One prediction's activations: fused inputs, per-direction hidden
    states, encoder outputs, attention weights, user vector, probability."""

    fused: np.ndarray                 # (steps, d_embed)
    hidden_fwd: np.ndarray | None     # (layers, steps, d_lstm)
    hidden_bwd: np.ndarray | None
    outputs: np.ndarray               # (steps, 2 * d_lstm)
    scores: np.ndarray | None         # (steps,); None when attention is "none"
    alpha: np.ndarray                 # (steps,)
    user_vec: np.ndarray              # (2 * d_lstm,)
    prob: float
    target_question: int
    _batch: BatchTrace = field(repr=False, default=None)


def embed_interaction(params: Parameters, config: ModelConfig,
                      question_index: int, response_bit: int) -> np.ndarray:
    """Fuse one question/response pair into the encoder input vector."""
    if not 0 <= question_index <= config.question_vocab:
        raise IndexError(
            f"question index {question_index} outside [0, {config.question_vocab}]")
    if response_bit not in (0, 1):
        raise IndexError(f"response bit must be 0 or 1, got {response_bit}")
    return params["embed.question"][question_index] * \
        params["embed.response"][response_bit]


def lstm_cell(w_x: np.ndarray, w_h: np.ndarray, b: np.ndarray,
              x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One gated recurrent update; returns the new (h, c)."""
    hdim = w_h.shape[0]
    a = x @ w_x + h_prev @ w_h + b
    gi = sigmoid(a[..., :hdim])
    gf = sigmoid(a[..., hdim:2 * hdim])
    gg = tanh(a[..., 2 * hdim:3 * hdim])
    go = sigmoid(a[..., 3 * hdim:])
    c = gf * c_prev + gi * gg
    return go * tanh(c), c


def encode_prefix(params: Parameters, config: ModelConfig,
                  fused_inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Encode a single history prefix; returns one output vector per step."""
    if len(fused_inputs) == 0:
        raise ColdStartError("cannot encode an empty history")
    if len(fused_inputs) > config.window:
        raise ShapeError(
            f"prefix length {len(fused_inputs)} exceeds window {config.window}")
    fused = np.stack(fused_inputs)[None, :, :]
    mask = np.ones((1, fused.shape[1]), dtype=params.dtype)
    z, _ = _encode_batch(params, config, fused.astype(params.dtype), mask, False)
    return list(z[0])


def attend(params: Parameters, config: ModelConfig,
           z_list: Sequence[np.ndarray], mask: np.ndarray,
           q_target: np.ndarray, kind: str | None = None):
    """Weight encoder outputs against the target question.

    Returns (user_vec, alpha). ``kind`` overrides the configured attention
    for ablation probes.
    """
    if kind is not None and kind != config.attention_kind:
        config = ModelConfig(**{**config.to_dict(), "attention_kind": kind})
    z = np.stack(z_list)[None, :, :].astype(params.dtype)
    mask = np.asarray(mask, dtype=params.dtype)[None, :]
    if mask.shape[1] != z.shape[1]:
        raise ShapeError(f"mask length {mask.shape[1]} != steps {z.shape[1]}")
    trace = BatchTrace()
    user_vec, alpha, _ = _attend_batch(params, config, z, mask,
                                       q_target[None, :].astype(params.dtype),
                                       False, trace)
    return user_vec[0], alpha[0]


def predict_head(params: Parameters, config: ModelConfig,
                 user_vec: np.ndarray, q_target: np.ndarray) -> float:
    """Score the (user vector, target question) pair; output in (0, 1)."""
    trace = BatchTrace()
    _, prob = _head_batch(params, config, user_vec[None, :].astype(params.dtype),
                          q_target[None, :].astype(params.dtype), False, trace)
    return float(prob[0])


def forward_step(params: Parameters, config: ModelConfig,
                 history: Sequence[tuple[int, int]], target_question: int,
                 cache: bool = False) -> ForwardTrace:
    """Predict correctness of ``target_question`` after ``history``.

    ``history`` is the ordered (question_index, response_bit) pairs the
    user has already consumed; only the most recent ``config.window`` of
    them enter the encoder. The prediction never sees anything at or after
    the target position, and two calls with the same inputs are
    bit-identical.
    """
    history = list(history)[-config.window:]
    if len(history) == 0:
        raise ColdStartError("empty history: serve the calibrated prior instead")
    questions = np.array([[q for q, _ in history]], dtype=np.int64)
    responses = np.array([[r for _, r in history]], dtype=np.int64)
    mask = np.ones_like(questions, dtype=params.dtype)
    targets = np.array([target_question], dtype=np.int64)
    bt = forward_batch(params, config, questions, responses, mask, targets,
                       cache=cache)
    steps = len(history)
    hdim = config.d_lstm
    hidden_fwd = hidden_bwd = None
    if bt.cached and config.encoder_kind in ("bilstm", "lstm"):
        hidden_fwd = np.stack([lc["fwd"]["h"][0] for lc in bt.layer_caches])
        if config.encoder_kind == "bilstm":
            hidden_bwd = np.stack([lc["bwd"]["h"][0] for lc in bt.layer_caches])
    return ForwardTrace(
        fused=bt.fused[0, :steps],
        hidden_fwd=hidden_fwd,
        hidden_bwd=hidden_bwd,
        outputs=bt.z[0, :steps],
        scores=None if bt.scores is None else bt.scores[0, :steps],
        alpha=bt.alpha[0, :steps],
        user_vec=bt.user_vec[0],
        prob=float(bt.prob[0]),
        target_question=int(target_question),
        _batch=bt,
    )


def backward_step(params: Parameters, config: ModelConfig, trace: ForwardTrace,
                  label: int) -> dict[str, np.ndarray]:
    """Exact parameter gradients of the cross-entropy at (trace.prob, label)."""
    if trace._batch is None or not trace._batch.cached:
        raise ValueError("trace was built without cache=True")
    return backward_batch(params, config, trace._batch,
                          np.array([label]), scale=1.0)
