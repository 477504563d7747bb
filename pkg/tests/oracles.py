"""Independent reference implementations used by the tests.

These use plain Python loops and ``math`` on nested lists so they share no
code path with the torch implementations they check.
"""

import math


def _rows(x):
    return [list(map(float, r)) for r in x.tolist()] if hasattr(x, "tolist") else [list(map(float, r)) for r in x]


def matmul(a, b):
    a, b = _rows(a), _rows(b)
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def softmax_row(logits):
    top = max(logits)
    ex = [math.exp(v - top) for v in logits]
    s = sum(ex)
    return [e / s for e in ex]


def dense_attention(q, k, v, bias=None, gate=None, renormalize=False):
    """softmax(q k^T / sqrt(d) + bias) v, optional post-softmax gate, one row at a time."""
    q, k, v = _rows(q), _rows(k), _rows(v)
    d = len(q[0])
    out = []
    for qi in q:
        logits = [sum(qi[c] * kj[c] for c in range(d)) / math.sqrt(d) for kj in k]
        if bias is not None:
            logits = [lg + float(b) for lg, b in zip(logits, bias)]
        w = softmax_row(logits)
        if gate is not None:
            w = [wi * float(g) for wi, g in zip(w, gate)]
            if renormalize:
                s = sum(w)
                w = [wi / s for wi in w] if s > 0 else w
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return out


def add(a, b, scale=1.0):
    return [[x + scale * y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def decoupled_oracle(q, k, v, tokens, w_k, w_v, gamma):
    base = dense_attention(q, k, v)
    img = dense_attention(q, matmul(tokens, w_k), matmul(tokens, w_v))
    return add(base, img, gamma)


def masked_oracle(q, k, v, refs, w_k, w_v, mode, neg_bias=1e4):
    """refs: list of (tokens, mask list, scale)."""
    out = dense_attention(q, k, v)
    for tokens, mask, scale in refs:
        keys, vals = matmul(tokens, w_k), matmul(tokens, w_v)
        if mode == "train_bias":
            branch = dense_attention(q, keys, vals, bias=[(float(m) - 1.0) * neg_bias for m in mask])
        else:
            branch = dense_attention(q, keys, vals, gate=mask)
        out = add(out, branch, scale)
    return out


def aggregator_oracle(zs, alphas, ws, gain=None, bias=None, eps=1e-5, norm=True):
    """LN(sum_i alpha_i z_i W_i) term by term; zs/ws are lists of matrices."""
    n = len(_rows(zs[0]))
    acc = None
    for a, z, w in zip(alphas, zs, ws):
        term = [[float(a) * x for x in row] for row in matmul(z, w)]
        acc = term if acc is None else add(acc, term)
    if not norm:
        return acc
    out = []
    for row in acc:
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        r = [(x - mu) / math.sqrt(var + eps) for x in row]
        if gain is not None:
            r = [x * float(g) + float(b) for x, g, b in zip(r, gain, bias)]
        out.append(r)
    assert len(out) == n
    return out


def max_abs_diff(a, b):
    a, b = _rows(a), _rows(b)
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def central_difference(f, param, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of the tensor ``param`` (in place)."""
    import torch

    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    import torch

    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return num / den


def frechet_1d(mu_a, sd_a, mu_b, sd_b):
    return (mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2
