"""Independent oracles shared by the test modules.

Everything here is deliberately written as plain loops or closed forms so
it cannot share a code path with the implementations it checks.
"""

import math

import numpy as np

from pcf_ecapa.tensor import Tensor


def naive_conv1d(x, w, b, dilation=1, groups=1):
    """Direct-summation grouped dilated conv with zero same padding.

    x: [B, Cin, T]; w: [Cout, Cin/groups, k]; b: [Cout] -> [B, Cout, T].
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, Cin, T = x.shape
    Cout, cin_g, k = w.shape
    cout_g = Cout // groups
    half = dilation * (k - 1) // 2
    out = np.zeros((B, Cout, T))
    for bb in range(B):
        for o in range(Cout):
            grp = o // cout_g
            for t in range(T):
                acc = 0.0
                for c in range(cin_g):
                    cin_idx = grp * cin_g + c
                    for j in range(k):
                        tt = t + dilation * j - half
                        if 0 <= tt < T:
                            acc += x[bb, cin_idx, tt] * w[o, c, j]
                out[bb, o, t] = acc
            if b is not None:
                out[bb, o, :] += b[o]
    return out


def finite_diff(loss_fn, arrays, h=1e-5, coords_per_array=None, rng=None):
    """Central finite-difference gradients of scalar loss_fn().

    ``arrays`` are the raw numpy buffers to perturb in place. Returns a
    list of (flat_index, fd_gradient) lists, one per array. When
    coords_per_array is set, a random subset of coordinates is probed.
    """
    results = []
    for arr in arrays:
        flat = arr.reshape(-1)
        if coords_per_array is None or flat.size <= coords_per_array:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_array, replace=False)
        entries = []
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = float(loss_fn().data)
            flat[c] = orig - h
            lm = float(loss_fn().data)
            flat[c] = orig
            entries.append((int(c), (lp - lm) / (2.0 * h)))
        results.append(entries)
    return results


def assert_grads_close(tensors, fd_results, rtol=1e-4):
    """Compare autodiff grads against finite differences, rel err < rtol."""
    for t, entries in zip(tensors, fd_results):
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        gflat = grad.reshape(-1)
        for c, fd in entries:
            err = abs(gflat[c] - fd) / max(1.0, abs(fd))
            assert err < rtol, f"grad mismatch at {c}: ad={gflat[c]}, fd={fd}, err={err}"


def circle_loss_oracle(cos_sims, labels, margin, scale):
    """Scalar-loop closed form of the pair-weighted margin loss."""
    cos_sims = np.asarray(cos_sims, dtype=np.float64)
    B, K = cos_sims.shape
    total = 0.0
    for i in range(B):
        y = labels[i]
        s_p = cos_sims[i, y]
        alpha_p = max(0.0, 1.0 + margin - s_p)
        logit_p = scale * alpha_p * ((1.0 - margin) - s_p)
        terms = []
        for j in range(K):
            if j == y:
                continue
            s_n = cos_sims[i, j]
            alpha_n = max(0.0, s_n + margin)
            terms.append(scale * alpha_n * (s_n - margin))
        hi = max(terms)
        lse_n = hi + math.log(sum(math.exp(t - hi) for t in terms))
        z = lse_n + logit_p
        total += max(z, 0.0) + math.log1p(math.exp(-abs(z)))
    return total / B


def scaled_cross_entropy_oracle(cos_sims, labels, scale):
    """Plain softmax cross entropy on scale*cos logits, via loops."""
    cos_sims = np.asarray(cos_sims, dtype=np.float64)
    B, K = cos_sims.shape
    total = 0.0
    for i in range(B):
        logits = [scale * cos_sims[i, j] for j in range(K)]
        hi = max(logits)
        lse = hi + math.log(sum(math.exp(v - hi) for v in logits))
        total += lse - logits[labels[i]]
    return total / B


def aam_loss_oracle(cos_sims, labels, margin, scale):
    """Loop evaluation of additive-angular-margin cross entropy."""
    cos_sims = np.asarray(cos_sims, dtype=np.float64)
    B, K = cos_sims.shape
    total = 0.0
    for i in range(B):
        logits = []
        for j in range(K):
            c = cos_sims[i, j]
            if j == labels[i]:
                s = math.sqrt(max(0.0, 1.0 - c * c))
                logits.append(scale * (c * math.cos(margin) - s * math.sin(margin)))
            else:
                logits.append(scale * c)
        hi = max(logits)
        lse = hi + math.log(sum(math.exp(v - hi) for v in logits))
        total += lse - logits[labels[i]]
    return total / B


def sweep_points_oracle(scores, labels):
    """Loop-counted operating points for every distinct threshold.

    Returns (thresholds, miss, fa) including the reject-all sentinel,
    mirroring the accept-when-score>=t convention.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_t = int(labels.sum())
    n_n = int((~labels).sum())
    thresholds = [np.inf]
    miss = [1.0]
    fa = [0.0]
    for t in sorted(set(scores.tolist()), reverse=True):
        n_miss = 0
        n_fa = 0
        for s, lab in zip(scores, labels):
            if lab and s < t:
                n_miss += 1
            if (not lab) and s >= t:
                n_fa += 1
        thresholds.append(t)
        miss.append(n_miss / n_t)
        fa.append(n_fa / n_n)
    return np.array(thresholds), np.array(miss), np.array(fa)


def eer_oracle(scores, labels):
    """Exhaustive sweep + the same linear interpolation convention."""
    thresholds, miss, fa = sweep_points_oracle(scores, labels)
    for i in range(len(miss)):
        d = miss[i] - fa[i]
        if d == 0.0:
            return float(miss[i]), float(thresholds[i])
        if d < 0.0:
            j, i0 = i, i - 1
            denom = (miss[j] - miss[i0]) - (fa[j] - fa[i0])
            alpha = (fa[i0] - miss[i0]) / denom
            eer = miss[i0] + alpha * (miss[j] - miss[i0])
            t_hi = thresholds[i0] if np.isfinite(thresholds[i0]) else thresholds[j]
            thr = t_hi + alpha * (thresholds[j] - t_hi)
            return float(eer), float(thr)
    raise AssertionError("no crossing found")


def min_dcf_oracle(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Exhaustive minimum of the normalized detection cost."""
    thresholds, miss, fa = sweep_points_oracle(scores, labels)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    best_cost, best_thr = None, None
    for i in range(len(miss)):
        cost = (c_miss * p_target * miss[i] + c_fa * (1.0 - p_target) * fa[i]) / norm
        if best_cost is None or cost <= best_cost:  # ties -> lower threshold
            best_cost, best_thr = cost, thresholds[i]
    if not np.isfinite(best_thr):
        best_thr = float(np.max(scores)) + 1.0
    return float(best_cost), float(best_thr)


def make_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=requires_grad)
