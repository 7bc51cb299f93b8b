"""Brute-force scalar-loop reference implementations for loss testing.

Deliberately slow and elementwise so they share no code path with the
vectorized implementations under test.
"""
import numpy as np
import torch

from airwaykit.perceptual import CANONICAL_LAYERS


class IdentityStubExtractor:
    """phi_j(x) = x for every canonical layer name; bias-free and linear."""
    layer_names = CANONICAL_LAYERS

    def features(self, batch):
        return {name: batch for name in self.layer_names}


def loop_feature_loss(acts_a, acts_b, norm="l1"):
    """Mean-over-batch, element-normalized activation difference, via loops."""
    total = 0.0
    a = np.asarray(acts_a, dtype=np.float64)
    b = np.asarray(acts_b, dtype=np.float64)
    batch = a.shape[0]
    per_example = int(np.prod(a.shape[1:]))
    for i in range(batch):
        s = 0.0
        for va, vb in zip(a[i].ravel(), b[i].ravel()):
            d = va - vb
            s += abs(d) if norm == "l1" else d * d
        total += s / per_example
    return total / batch


def loop_gram(activations):
    """(C, C) co-activation matrix via a triple loop, normalized by C*H*W."""
    a = np.asarray(activations, dtype=np.float64)
    c, h, w = a.shape
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            s = 0.0
            for y in range(h):
                for x in range(w):
                    s += a[i, y, x] * a[j, y, x]
            out[i, j] = s / (c * h * w)
    return out


def loop_style_loss(acts_a, acts_b):
    """Per-layer normalized absolute Gram difference, batch-averaged."""
    a = np.asarray(acts_a, dtype=np.float64)
    b = np.asarray(acts_b, dtype=np.float64)
    batch, c, h, w = a.shape
    total = 0.0
    for i in range(batch):
        ga = loop_gram(a[i])
        gb = loop_gram(b[i])
        total += np.abs(ga - gb).sum() / (c * h * w)
    return total / batch


def loop_composite(x, y_hat, y_style, feature_layers, style_layers,
                   reg_lambda, feature_weight=1.0, style_weight=1.0,
                   norm="l1"):
    """Composite total on the identity stub, one scalar at a time."""
    feat = sum(loop_feature_loss(y_hat, x, norm) for _ in feature_layers)
    sty = sum(loop_style_loss(y_hat, y_style) for _ in style_layers)
    xf = np.asarray(x, dtype=np.float64).ravel()
    yf = np.asarray(y_hat, dtype=np.float64).ravel()
    reg = sum(abs(a - b) for a, b in zip(yf, xf)) / xf.size
    return feature_weight * feat + style_weight * sty + reg_lambda * reg


def finite_difference_gradient(fn, tensor, indices, eps=1e-5):
    """Central differences of scalar fn at selected flat indices of tensor."""
    grads = []
    flat = tensor.reshape(-1)
    for idx in indices:
        orig = flat[idx].item()
        flat[idx] = orig + eps
        up = fn()
        flat[idx] = orig - eps
        down = fn()
        flat[idx] = orig
        grads.append((up - down) / (2.0 * eps))
    return np.array(grads)


def brute_force_concordance(risk, times, events):
    """O(n^2) comparable-pair loop; ties in risk count half."""
    risk = np.asarray(risk, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    n = len(risk)
    num = den = 0.0
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1.0
                if risk[i] > risk[j]:
                    num += 1.0
                elif risk[i] == risk[j]:
                    num += 0.5
    if den == 0:
        return None
    return num / den


def efron_loglik_loop(beta, x, times, events):
    """Textbook Efron partial log-likelihood for one covariate, via loops.

    For each distinct event time with d tied deaths D and risk set R:
    sum_{i in D} beta*x_i - sum_{l=0}^{d-1} log(S_R - (l/d) * S_D)
    where S_A = sum_{j in A} exp(beta * x_j).
    """
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    ll = 0.0
    for t in sorted(set(times[events])):
        dead = (times == t) & events
        d = int(dead.sum())
        s_risk = float(np.sum(np.exp(beta * x[times >= t])))
        s_dead = float(np.sum(np.exp(beta * x[dead])))
        ll += float(beta * x[dead].sum())
        for l in range(d):
            ll -= np.log(s_risk - (l / d) * s_dead)
    return ll


def grid_search_efron_beta(x, times, events, lo=-5.0, hi=5.0, n=200001):
    """Maximize the loop Efron likelihood on a grid (handles tied times)."""
    betas = np.linspace(lo, hi, n)
    values = [efron_loglik_loop(b, x, times, events) for b in betas]
    best = int(np.argmax(values))
    return float(betas[best]), float(values[best])


def grid_search_cox_beta(x, times, events, lo=-5.0, hi=5.0, n=200001):
    """Maximize the explicit one-covariate partial likelihood on a grid.

    No-ties Breslow form (equals Efron without ties): for each event i,
    contribution beta*x_i - log(sum_{j: t_j >= t_i} exp(beta*x_j)).
    """
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    betas = np.linspace(lo, hi, n)
    best_beta, best_ll = None, -np.inf
    for beta in betas:
        ll = 0.0
        for i in range(len(x)):
            if not events[i]:
                continue
            at_risk = x[times >= times[i]]
            ll += beta * x[i] - np.log(np.sum(np.exp(beta * at_risk)))
        if ll > best_ll:
            best_ll, best_beta = ll, beta
    return best_beta, best_ll
