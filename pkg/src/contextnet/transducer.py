"""Transducer head: LSTM label encoder, joint network, loss and greedy decoding."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_softmax

from . import numerics as nx
from .encoder import encode, init_encoder_params
from .errors import ConfigurationError, InvalidLabelError, UnsupportedFormatError
from .numerics import Tensor

BLANK_ID = 0
BLANK_SYMBOL = "<b>"
MAX_SYMBOLS_PER_FRAME = 10


class Vocab:
    """Token inventory with the blank symbol reserved at index 0."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != BLANK_SYMBOL:
            raise UnsupportedFormatError(f"vocabulary must start with the blank symbol {BLANK_SYMBOL!r}")
        if len(set(tokens)) != len(tokens):
            raise UnsupportedFormatError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.blank_id = BLANK_ID
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, symbols: Sequence[str]) -> list[int]:
        return [self._index[s] for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


@dataclass
class DecoderConfig:
    vocab_size: int
    embed_dim: int = 640
    hidden: int = 640
    joint_dim: int = 640

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters ------------------------------------------------------------------

def init_decoder_params(cfg: DecoderConfig, enc_dim: int, rng: np.random.Generator,
                        dtype=None) -> dict[str, Tensor]:
    """Flat mapping for the label encoder (``decoder.*``) and joint network (``joint.*``).

    LSTM gate order along the last axis is input, forget, candidate, output.
    """
    dtype = dtype or nx.get_default_dtype()
    V, E, H, J = cfg.vocab_size, cfg.embed_dim, cfg.hidden, cfg.joint_dim
    p = nx.parameter

    def normal(fan_in, shape):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)

    return {
        "decoder.embedding": p(rng.normal(0.0, 1.0, (V, E)), dtype=dtype),
        "decoder.start": p(rng.normal(0.0, 1.0, E), dtype=dtype),
        "decoder.lstm.w_x": p(normal(E, (E, 4 * H)), dtype=dtype),
        "decoder.lstm.w_h": p(normal(H, (H, 4 * H)), dtype=dtype),
        "decoder.lstm.bias": p(np.zeros(4 * H), dtype=dtype),
        "joint.enc_proj": p(normal(enc_dim, (enc_dim, J)), dtype=dtype),
        "joint.pred_proj": p(normal(H, (H, J)), dtype=dtype),
        "joint.bias": p(np.zeros(J), dtype=dtype),
        "joint.out_proj": p(normal(J, (J, V)), dtype=dtype),
        "joint.out_bias": p(np.zeros(V), dtype=dtype),
    }


@dataclass
class LabelEncoderParams:
    embedding: Tensor
    start: Tensor
    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @classmethod
    def from_dict(cls, params: Mapping[str, Tensor]) -> "LabelEncoderParams":
        return cls(params["decoder.embedding"], params["decoder.start"], params["decoder.lstm.w_x"],
                   params["decoder.lstm.w_h"], params["decoder.lstm.bias"])

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


@dataclass
class JointParams:
    enc_proj: Tensor
    pred_proj: Tensor
    bias: Tensor
    out_proj: Tensor
    out_bias: Tensor

    @classmethod
    def from_dict(cls, params: Mapping[str, Tensor]) -> "JointParams":
        return cls(params["joint.enc_proj"], params["joint.pred_proj"], params["joint.bias"],
                   params["joint.out_proj"], params["joint.out_bias"])


# -- label encoder ----------------------------------------------------------------------

def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], p: LabelEncoderParams):
    """One LSTM cell step. Returns ``(h', (h', c'))``."""
    h, c = state
    H = p.hidden
    if h.shape[-1] != H or c.shape[-1] != H:
        raise ConfigurationError(f"LSTM state width {h.shape[-1]}/{c.shape[-1]} != hidden {H}")
    z = nx.add(nx.add(nx.matmul(x, p.w_x), nx.matmul(h, p.w_h)), p.bias)
    i = nx.sigmoid(nx.slice_last(z, 0, H))
    f = nx.sigmoid(nx.slice_last(z, H, 2 * H))
    g = nx.tanh(nx.slice_last(z, 2 * H, 3 * H))
    o = nx.sigmoid(nx.slice_last(z, 3 * H, 4 * H))
    c_new = nx.add(nx.mul(f, c), nx.mul(i, g))
    h_new = nx.mul(o, nx.tanh(c_new))
    return h_new, (h_new, c_new)


def label_encoder(labels: np.ndarray, p: LabelEncoderParams) -> Tensor:
    """Prediction-network outputs for a padded label batch ``[B, U]`` -> ``[B, U+1, H]``.

    Position 0 consumes the learned start vector, position u the label u-1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, U = labels.shape
    H = p.hidden
    zeros = Tensor(np.zeros((B, H)), dtype=p.w_h.dtype)
    state = (zeros, zeros)
    x = nx.expand(p.start, (B, p.start.shape[0]))
    outputs = []
    for u in range(U + 1):
        out, state = lstm_step(x, state, p)
        outputs.append(out)
        if u < U:
            x = nx.take_rows(p.embedding, labels[:, u])
    return nx.stack(outputs, axis=1)


# -- joint network ---------------------------------------------------------------------

def joint(enc_t: Tensor, pred_u: Tensor, p: JointParams) -> Tensor:
    """``out_proj . tanh(enc_proj . enc + pred_proj . pred + bias) + out_bias``.

    Inputs broadcast against each other on leading axes.
    """
    hidden = nx.add(nx.add(nx.matmul(enc_t, p.enc_proj), nx.matmul(pred_u, p.pred_proj)), p.bias)
    return nx.add(nx.matmul(nx.tanh(hidden), p.out_proj), p.out_bias)


def joint_lattice(enc: Tensor, pred: Tensor, p: JointParams) -> Tensor:
    """Logits for every (frame, label position) pair: ``[B, T, U+1, V]``.

    Projections are computed once per frame / position and then broadcast.
    """
    B, T, _ = enc.shape
    U1 = pred.shape[1]
    J = p.bias.shape[0]
    a = nx.reshape(nx.matmul(enc, p.enc_proj), (B, T, 1, J))
    b = nx.reshape(nx.matmul(pred, p.pred_proj), (B, 1, U1, J))
    hidden = nx.tanh(nx.add(nx.add(a, b), p.bias))
    return nx.add(nx.matmul(hidden, p.out_proj), p.out_bias)


# -- loss ----------------------------------------------------------------------------------

def _check_labels(labels, vocab_size, blank):
    for y in labels:
        if y == blank:
            raise InvalidLabelError(f"label sequence contains the blank id {blank}")
        if not 0 <= y < vocab_size:
            raise InvalidLabelError(f"label {y} outside vocabulary of size {vocab_size}")


def _lattice_grad(log_probs: np.ndarray, labels: np.ndarray, lengths: np.ndarray, blank: int):
    """Forward-backward over a batch of lattices.

    log_probs ``[B, T, U+1, V]`` (float64), labels ``[B, U]`` padded, lengths ``[B]``.
    Returns per-utterance negative log-likelihood ``[B]`` and its gradient with
    respect to ``log_probs``.
    """
    B, T, U1, V = log_probs.shape
    U = U1 - 1
    neg_inf = -np.inf
    bidx = np.arange(B)
    blank_lp = log_probs[..., blank]                               # [B, T, U+1]
    if U > 0:
        gather = np.broadcast_to(labels[:, None, :, None], (B, T, U, 1))
        label_lp = np.take_along_axis(log_probs[:, :, :U, :], gather, axis=-1)[..., 0]
    else:
        label_lp = np.zeros((B, T, 0))

    fwd = np.full((B, T, U1), neg_inf)
    fwd[:, 0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            down = fwd[:, t - 1, u] + blank_lp[:, t - 1, u] if t > 0 else np.full(B, neg_inf)
            right = fwd[:, t, u - 1] + label_lp[:, t, u - 1] if u > 0 else np.full(B, neg_inf)
            fwd[:, t, u] = np.logaddexp(down, right)

    # terminal blank from (T-1, U_b) has a successor score of 0; everything past U_b is unreachable
    beyond = np.arange(U1)[None, :] > lengths[:, None]              # [B, U+1]
    terminal = np.where(np.arange(U1)[None, :] == lengths[:, None], 0.0, neg_inf)
    bwd = np.full((B, T, U1), neg_inf)
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            nxt = bwd[:, t + 1, u] if t < T - 1 else terminal[:, u]
            down = nxt + blank_lp[:, t, u]
            if u < U:
                right = np.where(u < lengths, bwd[:, t, u + 1] + label_lp[:, t, u], neg_inf)
            else:
                right = np.full(B, neg_inf)
            bwd[:, t, u] = np.where(beyond[:, u], neg_inf, np.logaddexp(down, right))

    log_like = bwd[:, 0, 0]
    nll = -log_like
    next_bwd = np.concatenate([bwd[:, 1:, :], terminal[:, None, :]], axis=1)
    with np.errstate(invalid="ignore"):
        blank_occ = np.exp(fwd + blank_lp + next_bwd - log_like[:, None, None])
        grad = np.zeros_like(log_probs)
        grad[..., blank] = -np.nan_to_num(blank_occ)
        if U > 0:
            label_occ = np.exp(fwd[:, :, :U] + label_lp + bwd[:, :, 1:] - log_like[:, None, None])
            label_occ = np.nan_to_num(label_occ)
            b_i, t_i, u_i = np.meshgrid(bidx, np.arange(T), np.arange(U), indexing="ij")
            np.add.at(grad, (b_i, t_i, u_i, np.broadcast_to(labels[:, None, :], (B, T, U))), -label_occ)
    return nll, grad


def rnnt_loss(logits, labels: Sequence[int], blank: int = BLANK_ID):
    """Negative log-likelihood of ``labels`` under one ``[T, U+1, V]`` logit lattice.

    Returns ``(loss, grad)`` where ``grad`` is d loss / d logits.  Computed in
    float64 log space regardless of the input precision.
    """
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 3:
        raise ConfigurationError(f"logits must be [T, U+1, V], got {logits.shape}")
    T, U1, V = logits.shape
    if T < 1:
        raise ConfigurationError("rnnt_loss needs at least one frame")
    if U1 != len(labels) + 1:
        raise ConfigurationError(f"logits have U+1={U1} label positions for {len(labels)} labels")
    _check_labels(labels, V, blank)
    log_probs = log_softmax(logits, axis=-1)
    nll, g_lp = _lattice_grad(log_probs[None], labels[None], np.array([len(labels)]), blank)
    g_lp = g_lp[0]
    grad = g_lp - np.exp(log_probs) * g_lp.sum(axis=-1, keepdims=True)
    return float(nll[0]), grad


def rnnt_loss_batch(logits: Tensor, labels: np.ndarray, lengths: Sequence[int],
                    blank: int = BLANK_ID) -> Tensor:
    """Mean transducer loss over a batch ``[B, T, U+1, V]`` as a tape operation.

    ``labels`` is ``[B, U]`` padded with any non-blank id; ``lengths`` gives the
    true label counts.  All utterances share the same frame count T.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, T, U1, V = logits.shape
    if labels.shape != (B, U1 - 1):
        raise ConfigurationError(f"labels {labels.shape} do not match logits {logits.shape}")
    for b in range(B):
        _check_labels(labels[b, :lengths[b]], V, blank)
    safe = np.where(np.arange(U1 - 1)[None, :] < lengths[:, None], labels, 1 if V > 1 else 0)
    log_probs = log_softmax(logits.data.astype(np.float64), axis=-1)
    nll, g_lp = _lattice_grad(log_probs, safe, lengths, blank)
    grad = (g_lp - np.exp(log_probs) * g_lp.sum(axis=-1, keepdims=True)) / B
    dtype = logits.dtype
    return nx.apply_op(np.asarray(nll.mean(), dtype=dtype), (logits,), lambda g: ((g * grad).astype(dtype),))


# -- model and decoding -------------------------------------------------------------------

class TransducerModel:
    """Encoder parameters + label encoder + joint network + vocabulary."""

    def __init__(self, encoder_config, decoder_config: DecoderConfig, params: dict[str, Tensor],
                 vocab: Vocab | None = None):
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.params = params
        self.vocab = vocab

    @classmethod
    def create(cls, encoder_config, decoder_config: DecoderConfig, seed: int = 0, vocab=None, dtype=None):
        rng = np.random.default_rng(seed)
        params = init_encoder_params(encoder_config, rng, dtype)
        params.update(init_decoder_params(decoder_config, encoder_config.output_dim, rng, dtype))
        return cls(encoder_config, decoder_config, params, vocab)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def encode(self, features, train: bool = False, params=None) -> Tensor:
        return encode(features, self.encoder_config, params or self.params, train)

    def loss(self, features, labels: np.ndarray, lengths, train: bool = True, params=None) -> Tensor:
        params = params or self.params
        enc = self.encode(features, train, params)
        pred = label_encoder(labels, LabelEncoderParams.from_dict(params))
        logits = joint_lattice(enc, pred, JointParams.from_dict(params))
        return rnnt_loss_batch(logits, labels, lengths)

    # decoding protocol used by greedy_decode
    def initial_state(self):
        p = LabelEncoderParams.from_dict(self.params)
        zeros = Tensor(np.zeros(p.hidden), dtype=p.w_h.dtype)
        out, state = lstm_step(p.start, (zeros, zeros), p)
        return out, state

    def predict(self, token: int, state):
        p = LabelEncoderParams.from_dict(self.params)
        return lstm_step(nx.take_rows(p.embedding, token), state, p)

    def joint_logits(self, enc_t: Tensor, pred_u: Tensor) -> np.ndarray:
        return joint(enc_t, pred_u, JointParams.from_dict(self.params)).data

    def decode(self, features) -> list[int]:
        with nx.no_grad():
            enc = self.encode(features, train=False)
        return greedy_decode(enc, self)


def greedy_decode(enc, model, max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
                  blank: int = BLANK_ID) -> list[int]:
    """Greedy transducer search over ``enc`` frames ``[T', Denc]``.

    ``model`` provides ``initial_state()``, ``predict(token, state)`` and
    ``joint_logits(enc_t, pred)``.  At most ``max_symbols_per_frame`` tokens are
    emitted before moving to the next frame.
    """
    enc = enc if isinstance(enc, Tensor) else Tensor(np.asarray(enc))
    hyp: list[int] = []
    with nx.no_grad():
        pred, state = model.initial_state()
        for t in range(enc.shape[0]):
            frame = Tensor(enc.data[t])
            for _ in range(max_symbols_per_frame):
                k = int(np.argmax(model.joint_logits(frame, pred)))
                if k == blank:
                    break
                hyp.append(k)
                pred, state = model.predict(k, state)
    return hyp
