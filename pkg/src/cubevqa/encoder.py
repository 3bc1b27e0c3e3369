"""Question encoding: token embedding followed by a single-layer GRU.

A question is a sequence of vocabulary ids. Each id selects an embedding row,
the GRU folds the sequence left to right from a zero initial state, and the
final hidden state is the question encoding. The gating convention is

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    cand = tanh(W_h x + U_h (r * h) + b_h)
    h' = z * h + (1 - z) * cand

i.e. the update gate ``z`` keeps the previous state. Many GRU writeups swap
the roles of ``z`` and ``1 - z``; the two are equivalent up to relabeling,
but this module commits to the form above and the tests pin it.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import InvalidArgumentError, Tensor, VocabularyError


@dataclass
class EncoderParams:
    """Embedding table plus the three GRU gate parameter triples.

    ``embed`` is (vocab, E); the ``w_*`` matrices are (H, E), the ``u_*``
    matrices (H, H), and the biases (H,).
    """

    embed: Tensor
    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor


def validate_tokens(token_ids, vocab_size, max_len):
    """Check a token-id sequence against the vocabulary and length limits."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidArgumentError("question must be a nonempty 1-d sequence of token ids")
    if ids.size > max_len:
        raise InvalidArgumentError(
            f"question length {ids.size} exceeds configured maximum {max_len}")
    bad = np.where((ids < 0) | (ids >= vocab_size))[0]
    if bad.size:
        raise VocabularyError(
            f"token id {int(ids[bad[0]])} at position {int(bad[0])} outside "
            f"vocabulary of size {vocab_size}")
    return ids


def embed_tokens(tape, params, token_ids):
    """Look up the embedding vector for each token, one node per position."""
    ids = np.asarray(token_ids, dtype=np.int64)
    return [T.embedding_lookup(tape, params.embed, ids[t]) for t in range(ids.size)]


def gru_step(tape, params, x_t, h_prev):
    """One GRU update; works on vectors ``(E,)/(H,)`` or batches ``(B, E)/(B, H)``."""
    z = T.sigmoid(tape, T.add(tape,
                              T.affine(tape, x_t, params.w_update, params.b_update),
                              T.affine(tape, h_prev, params.u_update)))
    r = T.sigmoid(tape, T.add(tape,
                              T.affine(tape, x_t, params.w_reset, params.b_reset),
                              T.affine(tape, h_prev, params.u_reset)))
    cand = T.tanh(tape, T.add(tape,
                              T.affine(tape, x_t, params.w_cand, params.b_cand),
                              T.affine(tape, T.mul(tape, r, h_prev), params.u_cand)))
    return T.add(tape, T.mul(tape, z, h_prev),
                 T.mul(tape, T.one_minus(tape, z), cand))


def encode_question(tape, params, token_ids):
    """Fold ``gru_step`` over a single question and return the final state."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidArgumentError("encode_question: empty token sequence")
    hidden = params.b_update.value.shape[0]
    h = T.constant(np.zeros(hidden))
    for x_t in embed_tokens(tape, params, ids):
        h = gru_step(tape, params, x_t, h)
    return h


def encode_questions_batch(tape, params, token_ids, lengths):
    """Encode a batch of questions of varying true lengths.

    ``token_ids`` is ``(B, T_max)`` padded arbitrarily past each question's
    length; ``lengths`` gives the true length per row. The recurrence runs for
    ``T_max`` steps and each example's state is captured at its own final
    step, so padding never influences the returned encodings (the GRU is
    causal and the capture masks discard later steps).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2:
        raise InvalidArgumentError(f"expected (B, T) token ids, got shape {ids.shape}")
    batch, t_max = ids.shape
    if lengths.shape != (batch,) or np.any(lengths < 1) or np.any(lengths > t_max):
        raise InvalidArgumentError("lengths must be in [1, T_max] for every example")
    hidden = params.b_update.value.shape[0]
    h = T.constant(np.zeros((batch, hidden)))
    encoding = None
    for t in range(t_max):
        x_t = T.embedding_lookup(tape, params.embed, ids[:, t])
        h = gru_step(tape, params, x_t, h)
        pick = T.constant((lengths == t + 1).astype(np.float64))
        picked = T.scale_rows(tape, h, pick)
        encoding = picked if encoding is None else T.add(tape, encoding, picked)
    return encoding
