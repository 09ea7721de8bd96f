"""LSTM decoding: gate equations, the word-distribution head, and search.

The search routines are generic over a step function

    step_fn(state, y_prev) -> (log_probs: ndarray[|D|], new_state, info)

where ``info`` is an opaque per-step payload (the caption model passes its
attention weights through it). Hypothesis scores are accumulated
log-probabilities with no length normalization; ties break toward the
lexicographically smaller token sequence, i.e. the lower token id at the
first difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, VocabularyError
from .tensor import Tensor
from .vocab import END, PAD, START, UNK  # noqa: F401  (re-exported for callers)


def embed(y, emb):
    """Differentiable row lookup into an embedding matrix."""
    if emb.data.ndim != 2:
        raise DimensionError(f"embed: embedding matrix must be rank 2, got {emb.shape}")
    if not 0 <= y < emb.shape[0]:
        raise VocabularyError(f"embed: token id {y} out of range 0..{emb.shape[0] - 1}")
    return T.take_row(emb, y)


@dataclass
class LSTMParams:
    """One weight matrix and bias per gate, acting on [x_t; h_{t-1}]."""

    in_w: Tensor
    in_b: Tensor
    forget_w: Tensor
    forget_b: Tensor
    out_w: Tensor
    out_b: Tensor
    cand_w: Tensor
    cand_b: Tensor

    @property
    def hidden(self):
        return self.in_w.shape[0]

    @staticmethod
    def init(rng, input_dim, hidden, scale=0.08):
        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        p = LSTMParams(
            in_w=u(hidden, input_dim + hidden), in_b=u(hidden),
            forget_w=u(hidden, input_dim + hidden), forget_b=u(hidden),
            out_w=u(hidden, input_dim + hidden), out_b=u(hidden),
            cand_w=u(hidden, input_dim + hidden), cand_b=u(hidden),
        )
        p.forget_b.data[:] = 1.0  # remember by default at the start of training
        return p

    def named(self, prefix):
        return {f"{prefix}.{f}": getattr(self, f) for f in (
            "in_w", "in_b", "forget_w", "forget_b",
            "out_w", "out_b", "cand_w", "cand_b",
        )}

    def tensors(self):
        return list(self.named("p").values())


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    t: int = 0

    @staticmethod
    def zero(hidden):
        return DecoderState(Tensor(np.zeros(hidden)), Tensor(np.zeros(hidden)), 0)


def lstm_step(state, x_t, params):
    """Standard gate equations; returns the next state."""
    z = T.concat([x_t, state.h])
    i = T.sigmoid(T.add(T.matmul(params.in_w, z), params.in_b))
    f = T.sigmoid(T.add(T.matmul(params.forget_w, z), params.forget_b))
    o = T.sigmoid(T.add(T.matmul(params.out_w, z), params.out_b))
    g = T.tanh_map(T.add(T.matmul(params.cand_w, z), params.cand_b))
    c = T.add(T.mul(f, state.c), T.mul(i, g))
    h = T.mul(o, T.tanh_map(c))
    return DecoderState(h=h, c=c, t=state.t + 1)


@dataclass
class OutputParams:
    """Deep-output head: logits from the hidden state plus the previous word."""

    hid_w: Tensor   # (|D|, d)
    emb_w: Tensor   # (|D|, e)
    bias: Tensor    # (|D|,)

    @staticmethod
    def init(rng, vocab_size, hidden, embed_dim, scale=0.08):
        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        return OutputParams(u(vocab_size, hidden), u(vocab_size, embed_dim), u(vocab_size))

    def named(self, prefix):
        return {f"{prefix}.{f}": getattr(self, f) for f in ("hid_w", "emb_w", "bias")}

    def tensors(self):
        return [self.hid_w, self.emb_w, self.bias]


def output_distribution(h_t, y_prev, params, embedding):
    """softmax(hid_w h_t + emb_w E[y_prev] + bias) over the vocabulary."""
    logits = T.add(
        T.add(T.matmul(params.hid_w, h_t), T.matmul(params.emb_w, embed(y_prev, embedding))),
        params.bias,
    )
    return T.softmax(logits)


# ---------------------------------------------------------------------------
# search


@dataclass
class BeamHypothesis:
    tokens: tuple = ()
    logp: float = 0.0
    state: object = None
    finished: bool = False
    infos: tuple = field(default=(), repr=False)


def _check_search_args(vocab_size, width, max_len):
    if vocab_size < 1:
        raise ConfigError("search needs a nonempty vocabulary")
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")


def greedy_decode(step_fn, start_state, vocab_size, end_token=END, max_len=16, start_token=START):
    """Pick the argmax token each step (lowest id on exact ties)."""
    _check_search_args(vocab_size, 1, max_len)
    hyp = BeamHypothesis(state=start_state)
    for _ in range(max_len):
        y_prev = hyp.tokens[-1] if hyp.tokens else start_token
        logp, state, info = step_fn(hyp.state, y_prev)
        y = int(np.argmax(logp))
        hyp = BeamHypothesis(
            tokens=hyp.tokens + (y,),
            logp=hyp.logp + float(logp[y]),
            state=state,
            finished=(y == end_token),
            infos=hyp.infos + (info,),
        )
        if hyp.finished:
            return hyp
    return replace(hyp, finished=True)


def beam_search(step_fn, start_state, vocab_size, end_token=END, width=5, max_len=16,
                start_token=START):
    """Best-first search keeping ``width`` hypotheses per step.

    Hypotheses that emit ``end_token`` retire from the beam; the winner is
    the best accumulated log-probability over retired and truncated
    hypotheses, with no length normalization.
    """
    _check_search_args(vocab_size, width, max_len)
    live = [BeamHypothesis(state=start_state)]
    done = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            y_prev = hyp.tokens[-1] if hyp.tokens else start_token
            logp, state, info = step_fn(hyp.state, y_prev)
            infos = hyp.infos + (info,)
            for y in range(vocab_size):
                candidates.append(BeamHypothesis(
                    tokens=hyp.tokens + (y,),
                    logp=hyp.logp + float(logp[y]),
                    state=state,
                    finished=(y == end_token),
                    infos=infos,
                ))
        candidates.sort(key=lambda c: (-c.logp, c.tokens))
        live = []
        for cand in candidates[:width]:
            (done if cand.finished else live).append(cand)
        if not live:
            break
    done.extend(replace(h, finished=True) for h in live)
    done.sort(key=lambda c: (-c.logp, c.tokens))
    return done[0]


def decode_caption(model, image, mode="beam", width=5, max_len=16):
    """Caption one input with a model exposing begin/step_logprobs/vocab.

    Returns (tokens, infos): the emitted tokens with the end marker
    stripped, and one opaque info payload per step taken (including the
    step that emitted the end marker).
    """
    if mode not in ("beam", "greedy"):
        raise ConfigError(f"unknown decode mode {mode!r}")
    step_fn = lambda state, y_prev: model.step_logprobs(state, y_prev, image)
    start = model.begin(image)
    if mode == "greedy":
        hyp = greedy_decode(step_fn, start, model.vocab.size, end_token=END, max_len=max_len)
    else:
        hyp = beam_search(step_fn, start, model.vocab.size, end_token=END,
                          width=width, max_len=max_len)
    tokens = list(hyp.tokens)
    if tokens and tokens[-1] == END:
        tokens = tokens[:-1]
    return tokens, list(hyp.infos)
