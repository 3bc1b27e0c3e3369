"""Independent oracles shared by the test modules.

Everything here is deliberately written with plain Python loops and the math
module, not numpy, so that agreement with the library is evidence rather
than tautology.
"""

import math


# ---------------------------------------------------------------------------
# scalar-loop attention pipelines


def naive_softmax(xs):
    m = max(xs)
    exps = [math.exp(x - m) for x in xs]
    total = sum(exps)
    return [e / total for e in exps]


def naive_channel_mean(v):
    k = len(v)
    d = len(v[0])
    return [sum(v[i][j] for i in range(k)) / k for j in range(d)]


def naive_matvec(w, x):
    return [sum(w[i][j] * x[j] for j in range(len(x))) for i in range(len(w))]


def naive_channel_attention(u_bar, q, p):
    """p: dict with vis_scale, vis_shift, w_question, b_question, w_score, b_score."""
    d = len(u_bar)
    c_v = [p["vis_scale"][i] * u_bar[i] + p["vis_shift"][i] for i in range(d)]
    wq = naive_matvec(p["w_question"], q)
    c_q = [wq[i] + p["b_question"][i] for i in range(len(wq))]
    scores = []
    for i in range(d):
        row = [math.tanh(c_v[i] * c_q[j]) for j in range(len(c_q))]
        scores.append(sum(p["w_score"][j] * row[j] for j in range(len(row))) + p["b_score"])
    return naive_softmax(scores)


def naive_apply_channel(beta, v):
    return [[beta[j] * v[i][j] for j in range(len(v[0]))] for i in range(len(v))]


def naive_gains(beta, rescale, strength=0.1):
    if not rescale:
        return list(beta)
    d = len(beta)
    return [1.0 + strength * (d * b - 1.0) for b in beta]


def naive_spatial_attention(v, q, p, tanh_after_sum):
    wq = naive_matvec(p["w_question"], q)
    c_q = [wq[i] + p["b_question"][i] for i in range(len(wq))]
    scores = []
    for row in v:
        wv = naive_matvec(p["w_visual"], row)
        if tanh_after_sum:
            a = [math.tanh(wv[i] + p["b_visual"][i] + c_q[i]) for i in range(len(wv))]
        else:
            a = [math.tanh(wv[i] + p["b_visual"][i]) + c_q[i] for i in range(len(wv))]
        scores.append(sum(p["w_score"][i] * a[i] for i in range(len(a))) + p["b_score"])
    return naive_softmax(scores)


def naive_apply_spatial(eta, v):
    k = len(v)
    d = len(v[0])
    return [sum(eta[i] * v[i][j] for i in range(k)) / k for j in range(d)]


def naive_cva(v, q, chan, spat, tanh_after_sum, rescale=True, strength=0.1):
    beta = naive_channel_attention(naive_channel_mean(v), q, chan)
    v_c = naive_apply_channel(naive_gains(beta, rescale, strength), v)
    eta = naive_spatial_attention(v_c, q, spat, tanh_after_sum)
    return naive_apply_spatial(eta, v_c), beta, eta


def naive_cva_v(v, q, chan, spat, tanh_after_sum, rescale=True, strength=0.1):
    eta = naive_spatial_attention(v, q, spat, tanh_after_sum)
    reweighted = [[eta[i] * v[i][j] for j in range(len(v[0]))] for i in range(len(v))]
    beta = naive_channel_attention(naive_channel_mean(reweighted), q, chan)
    v_c = naive_apply_channel(naive_gains(beta, rescale, strength), reweighted)
    return naive_channel_mean(v_c), beta, eta


def naive_ca_only(v, q, chan, rescale=True, strength=0.1):
    beta = naive_channel_attention(naive_channel_mean(v), q, chan)
    return naive_channel_mean(
        naive_apply_channel(naive_gains(beta, rescale, strength), v)), beta


def naive_ra_only(v, q, spat, tanh_after_sum):
    eta = naive_spatial_attention(v, q, spat, tanh_after_sum)
    return naive_apply_spatial(eta, v), eta


def channel_params_as_lists(p):
    return {
        "vis_scale": p.vis_scale.value.tolist(),
        "vis_shift": p.vis_shift.value.tolist(),
        "w_question": p.w_question.value.tolist(),
        "b_question": p.b_question.value.tolist(),
        "w_score": p.w_score.value.tolist(),
        "b_score": float(p.b_score.value),
    }


def spatial_params_as_lists(p):
    return {
        "w_visual": p.w_visual.value.tolist(),
        "b_visual": p.b_visual.value.tolist(),
        "w_question": p.w_question.value.tolist(),
        "b_question": p.b_question.value.tolist(),
        "w_score": p.w_score.value.tolist(),
        "b_score": float(p.b_score.value),
    }


# ---------------------------------------------------------------------------
# scalar-loop GRU


def naive_gru_step(x, h, p):
    """p maps each of w/u/b x update/reset/cand to nested lists."""
    hidden = len(h)

    def gate(wname, uname, bname, xs, hs):
        w, u, b = p[wname], p[uname], p[bname]
        return [sum(w[i][j] * xs[j] for j in range(len(xs)))
                + sum(u[i][j] * hs[j] for j in range(len(hs))) + b[i]
                for i in range(hidden)]

    z = [1.0 / (1.0 + math.exp(-v)) for v in gate("w_update", "u_update", "b_update", x, h)]
    r = [1.0 / (1.0 + math.exp(-v)) for v in gate("w_reset", "u_reset", "b_reset", x, h)]
    rh = [r[i] * h[i] for i in range(hidden)]
    cand = [math.tanh(v) for v in gate("w_cand", "u_cand", "b_cand", x, rh)]
    return [z[i] * h[i] + (1.0 - z[i]) * cand[i] for i in range(hidden)]


def naive_encode(token_ids, embed, p, hidden):
    h = [0.0] * hidden
    for t in token_ids:
        h = naive_gru_step(embed[int(t)], h, p)
    return h


def encoder_params_as_lists(p):
    return {name: getattr(p, name).value.tolist()
            for name in ("w_update", "u_update", "b_update", "w_reset", "u_reset",
                         "b_reset", "w_cand", "u_cand", "b_cand")}


# ---------------------------------------------------------------------------
# toy-task decoders (read the documented block layout from raw features)


def decode_spatial(features, region, layout):
    """Bayes-optimal read of the queried region's color block."""
    target_row = None
    for row in range(features.shape[0]):
        block = features[row, layout.identity_slice]
        if max(range(len(block)), key=lambda i: block[i]) == region and block[region] > 0.5:
            target_row = row
            break
    assert target_row is not None, "no row carries the queried identity"
    color_block = features[target_row, layout.color_slice]
    return max(range(len(color_block)), key=lambda i: (color_block[i], -i))


def decode_spatial_from_mean(features, layout):
    """The same read restricted to the per-channel mean (ties pick index 0)."""
    k = features.shape[0]
    mean = [sum(float(features[r, j]) for r in range(k)) / k
            for j in range(layout.color_slice.start, layout.color_slice.stop)]
    best = 0
    for i in range(1, len(mean)):
        if mean[i] > mean[best]:
            best = i
    return best


def decode_channel_from_mean(features, family, layout):
    k = features.shape[0]
    sl = layout.family_slice(family)
    mean = [sum(float(features[r, j]) for r in range(k)) / k for j in range(sl.start, sl.stop)]
    return max(range(len(mean)), key=lambda i: (mean[i], -i))
