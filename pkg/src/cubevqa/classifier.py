"""Answer prediction: fuse attended visual features with the question.

A single hidden layer combines the two inputs, and a linear layer over the
answer vocabulary produces pre-softmax scores. The training loss is the
cross-entropy of the true answer under those scores, computed in fused
log-sum-exp form so that large vocabularies cannot overflow.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ClassifierParams:
    """Fusion and output parameters.

    ``w_visual`` (H_f x D) and ``w_question`` (H_f x H) project the two
    inputs, ``b_hidden`` (H_f) biases the fused hidden layer, and
    ``w_out`` (A x H_f) with ``b_out`` (A) produce answer scores.
    """

    w_visual: Tensor
    w_question: Tensor
    b_hidden: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass
class AnswerDistribution:
    """Softmax probabilities over the answer vocabulary plus the argmax.

    Ties in the argmax resolve to the lowest index.
    """

    probabilities: np.ndarray
    top_index: int


def answer_scores(tape, visual, question, params, dropout_mask=None):
    """Pre-softmax answer scores; ``dropout_mask`` gates the hidden layer.

    ``dropout_mask`` is an already-scaled keep mask (inverted dropout) and is
    only supplied in training mode.
    """
    hidden = T.tanh(tape, T.add(tape,
                                T.affine(tape, visual, params.w_visual),
                                T.affine(tape, question, params.w_question,
                                         params.b_hidden)))
    if dropout_mask is not None:
        hidden = T.mul(tape, hidden, dropout_mask)
    return T.affine(tape, hidden, params.w_out, params.b_out)


def predict_answer(visual, question, params):
    """Evaluation-mode answer distribution for a single instance."""
    scores = answer_scores(None, visual, question, params)
    probs = T.softmax(None, scores).value
    return AnswerDistribution(probabilities=probs, top_index=int(np.argmax(probs)))


def answer_loss(tape, scores, label):
    """Cross-entropy of the labeled answer; scalar for one instance,
    per-example vector for a batch."""
    return T.cross_entropy(tape, scores, label)
