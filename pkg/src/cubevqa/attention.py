"""Channel and region attention over object-region feature maps.

The visual input is a feature map ``V`` of shape ``(K, D)``: ``K`` detected
object regions, each described by ``D`` feature channels. Two attention
mechanisms condition on a question encoding ``Q``:

* channel attention produces a distribution ``beta`` over the ``D`` channels,
  computed from the per-channel mean of the map (so it is invariant to the
  order of regions);
* spatial attention produces a distribution ``eta`` over the ``K`` regions
  (equivariant to region order).

Four pipelines compose them: channel-then-spatial stacking, the reversed
stacking, and the two single-attention ablations. All functions accept a
batched map ``(B, K, D)`` with ``Q`` of shape ``(B, H)`` as well as the
single-instance shapes.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ChannelAttentionParams:
    """Parameters of the channel scorer.

    ``vis_scale``/``vis_shift`` embed the channel-mean vector elementwise
    (both length D); ``w_question``/``b_question`` project the question into
    the attention space (h_a x H and h_a); ``w_score`` (h_a) and the scalar
    ``b_score`` reduce each channel's row of the joint map to one score.
    """

    vis_scale: Tensor
    vis_shift: Tensor
    w_question: Tensor
    b_question: Tensor
    w_score: Tensor
    b_score: Tensor


@dataclass
class SpatialAttentionParams:
    """Parameters of the region scorer.

    ``w_visual`` (h_a x D) and ``b_visual`` embed each region vector;
    ``w_question``/``b_question`` embed the question; ``w_score`` (h_a) and
    scalar ``b_score`` reduce each region's joint vector to one score.
    """

    w_visual: Tensor
    b_visual: Tensor
    w_question: Tensor
    b_question: Tensor
    w_score: Tensor
    b_score: Tensor


def channel_mean_pool(tape, feature_map):
    """Per-channel mean over regions: ``(..., K, D) -> (..., D)``."""
    return T.mean_over_rows(tape, feature_map)


def channel_attention(tape, channel_means, question, params):
    """Score every channel against the question and normalize.

    The channel means are embedded elementwise, the question is projected to
    the attention space, their outer product is squashed with tanh, and each
    channel's row of the resulting (D, h_a) map is reduced to a scalar score.
    Softmax over the D scores yields the channel weights.
    """
    vis = T.add_vec(tape, T.mul_vec(tape, channel_means, params.vis_scale),
                    params.vis_shift)
    query = T.affine(tape, question, params.w_question, params.b_question)
    joint = T.tanh(tape, T.outer(tape, vis, query))
    scores = T.add_scalar(tape, T.matvec_last(tape, joint, params.w_score),
                          params.b_score)
    return T.softmax(tape, scores)


def apply_channel_weights(tape, channel_weights, feature_map):
    """Scale every region's channel ``d`` by ``channel_weights[d]``."""
    return T.mul_vec(tape, feature_map, channel_weights)


# Contrast of the rescaled channel gains: g = 1 + s * (D*beta - 1). At the
# default the gains hover near one, floored at 1 - s, so the softmax's
# zero-sum coupling can never starve a channel block outright.
DEFAULT_GAIN_STRENGTH = 0.1


def _channel_gains(tape, channel_weights, rescale, strength=DEFAULT_GAIN_STRENGTH):
    """Modulation gains from the channel distribution.

    The distribution sums to one over D channels, so multiplying by it
    directly shrinks every feature by ~1/D; stacked on top of the region
    scorer's tanh that collapses it into its linear regime, where softmax
    shift-invariance erases the question signal and the region stage cannot
    train. ``rescale=True`` therefore remaps the weights to mean-one gains
    ``1 + strength * (D*beta - 1)``: uniform attention passes the map
    through unchanged, selection contrast scales with ``strength``, and no
    channel's gain falls below ``1 - strength`` (full-strength gains let the
    modulation starve whichever channels the classifier does not favor,
    which freezes the downstream region scorer; selection stays decisive
    for the classifier at small strengths because softmax contrast is
    already resolved there). ``False`` restores the literal modulation.
    """
    if not rescale:
        return channel_weights
    d = channel_weights.value.shape[-1]
    scaled = T.scale(tape, channel_weights, strength * d)
    return T.add(tape, scaled,
                 T.constant(np.full(scaled.value.shape, 1.0 - strength)))


def spatial_attention(tape, feature_map, question, params, tanh_after_sum=False):
    """Score every region against the question and normalize.

    With ``tanh_after_sum=False`` the visual term alone is squashed and the
    projected question is then added to every region row:

        a_k = tanh(W_v v_k + b_v) + (W_q Q + b_q)

    Because softmax is shift-invariant, the added question term cancels and
    the weights depend on the map only. ``tanh_after_sum=True`` moves the
    question inside the squash,

        a_k = tanh(W_v v_k + b_v + W_q Q + b_q)

    which lets the question reorder the region scores; trained models default
    to this form (see ``model.ModelConfig``).
    """
    vis = T.rows_affine(tape, feature_map, params.w_visual, params.b_visual)
    query = T.affine(tape, question, params.w_question, params.b_question)
    if tanh_after_sum:
        joint = T.tanh(tape, T.add_vec(tape, vis, query))
    else:
        joint = T.add_vec(tape, T.tanh(tape, vis), query)
    scores = T.add_scalar(tape, T.matvec_last(tape, joint, params.w_score),
                          params.b_score)
    return T.softmax(tape, scores)


def apply_spatial_weights(tape, spatial_weights, feature_map):
    """Aggregate regions as ``(1/K) * sum_k eta[k] * v_k``.

    The 1/K prefactor is kept deliberately, so that injecting all-ones
    weights reproduces the plain per-channel mean; downstream affine layers
    absorb the constant scale.
    """
    k = feature_map.value.shape[-2]
    return T.weighted_row_sum(tape, feature_map, spatial_weights, prefactor=1.0 / k)


@dataclass
class AttentionReadout:
    """Attention distributions captured during a pipeline forward pass."""

    channel_weights: Tensor = None
    spatial_weights: Tensor = None


def cva_forward(tape, feature_map, question, channel_params, spatial_params,
                tanh_after_sum=False, rescale_channel_gains=True,
                gain_strength=DEFAULT_GAIN_STRENGTH):
    """Channel attention first, then spatial attention on the modulated map."""
    beta = channel_attention(tape, channel_mean_pool(tape, feature_map),
                             question, channel_params)
    modulated = apply_channel_weights(
        tape, _channel_gains(tape, beta, rescale_channel_gains, gain_strength),
        feature_map)
    eta = spatial_attention(tape, modulated, question, spatial_params,
                            tanh_after_sum=tanh_after_sum)
    attended = apply_spatial_weights(tape, eta, modulated)
    return attended, AttentionReadout(channel_weights=beta, spatial_weights=eta)


def cva_v_forward(tape, feature_map, question, channel_params, spatial_params,
                  tanh_after_sum=False, rescale_channel_gains=True,
                  gain_strength=DEFAULT_GAIN_STRENGTH):
    """Reversed stacking: spatial attention first, then channel attention.

    The spatial weights rescale rows without summing them (so a K x D map
    survives for channel attention to pool), and the 1/K aggregation happens
    once, after the channel modulation.
    """
    eta = spatial_attention(tape, feature_map, question, spatial_params,
                            tanh_after_sum=tanh_after_sum)
    reweighted = T.scale_rows(tape, feature_map, eta)
    beta = channel_attention(tape, channel_mean_pool(tape, reweighted),
                             question, channel_params)
    modulated = apply_channel_weights(
        tape, _channel_gains(tape, beta, rescale_channel_gains, gain_strength),
        reweighted)
    attended = T.mean_over_rows(tape, modulated)
    return attended, AttentionReadout(channel_weights=beta, spatial_weights=eta)


def ca_only_forward(tape, feature_map, question, channel_params,
                    rescale_channel_gains=True,
                    gain_strength=DEFAULT_GAIN_STRENGTH):
    """Channel attention only; regions are aggregated by the plain mean."""
    beta = channel_attention(tape, channel_mean_pool(tape, feature_map),
                             question, channel_params)
    modulated = apply_channel_weights(
        tape, _channel_gains(tape, beta, rescale_channel_gains, gain_strength),
        feature_map)
    attended = T.mean_over_rows(tape, modulated)
    return attended, AttentionReadout(channel_weights=beta)


def ra_only_forward(tape, feature_map, question, spatial_params,
                    tanh_after_sum=False):
    """Region attention only, computed and applied on the raw map."""
    eta = spatial_attention(tape, feature_map, question, spatial_params,
                            tanh_after_sum=tanh_after_sum)
    attended = apply_spatial_weights(tape, eta, feature_map)
    return attended, AttentionReadout(spatial_weights=eta)
