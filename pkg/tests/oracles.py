"""Independent reference implementations: plain loops, no shared code with the package."""

from __future__ import annotations

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[s, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[s, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def dense(x, w, b=None):
    n, d = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for s in range(n):
        for k in range(m):
            acc = 0.0
            for i in range(d):
                acc += x[s, i] * w[i, k]
            out[s, k] = acc + (b[k] if b is not None else 0.0)
    return out


def pool2d(x, mode, window, stride=None):
    stride = stride or window
    n, c, h, wd = x.shape
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for s in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    vals = [x[s, ch, i * stride + u, j * stride + v] for u in range(window) for v in range(window)]
                    out[s, ch, i, j] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Returns (out, batch mean, biased batch var) computed channel by channel."""
    c = x.shape[1]
    out = np.zeros_like(x)
    means, vars_ = np.zeros(c), np.zeros(c)
    for ch in range(c):
        vals = x[:, ch].ravel()
        m = sum(vals) / len(vals)
        v = sum((e - m) ** 2 for e in vals) / len(vals)
        means[ch], vars_[ch] = m, v
        out[:, ch] = (x[:, ch] - m) / np.sqrt(v + eps) * gamma[ch] + beta[ch]
    return out, means, vars_


def batchnorm_eval(x, gamma, beta, mean, var, eps=1e-5):
    out = np.zeros_like(x)
    for ch in range(x.shape[1]):
        out[:, ch] = (x[:, ch] - mean[ch]) / np.sqrt(var[ch] + eps) * gamma[ch] + beta[ch]
    return out


def softmax_cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        z = sum(np.exp(v - m) for v in row)
        total += -(row[y] - m - np.log(z))
    return total / len(labels)


def central_difference(f, x: np.ndarray, index, step=1e-5) -> float:
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    old = x[index]
    x[index] = old + step
    up = f()
    x[index] = old - step
    down = f()
    x[index] = old
    return (up - down) / (2 * step)


# cost-model oracle: walks allocated parameter tensors and recomputes FLOPs per node


def params_by_allocation(net) -> int:
    """Count trainable entries actually allocated by a runtime network."""
    return int(sum(t.data.size for t in net.params.values()))


def flops_by_walk(spec) -> int:
    """FLOPs per sample from a fresh shape propagation written independently of the package."""
    shapes = {"input": tuple(spec.input_shape)}
    producers: dict[str, list[str]] = {}
    for a, b in spec.edges:
        producers.setdefault(b, []).append(a)
    done = {"input"}
    pending = [n for n in spec.nodes]
    total = 0
    while pending:
        progressed = False
        for node in list(pending):
            srcs = producers.get(node.id, [])
            if not all(s in done for s in srcs):
                continue
            ins = [shapes[s] for s in srcs]
            p = node.params
            k = node.kind
            if k == "conv" or (k == "adapter" and p.get("op") == "conv1x1"):
                c, h, w = ins[0]
                kern = p.get("kernel", 1)
                st = p.get("stride", 1)
                pad = p.get("padding", 0)
                ho = (h + 2 * pad - kern) // st + 1
                wo = (w + 2 * pad - kern) // st + 1
                cout = p["out_channels"]
                out = (cout, ho, wo)
                macs = cout * c * kern * kern * ho * wo
                total += 2 * macs
                if k == "conv" and p.get("bias", True):
                    total += cout * ho * wo
            elif k == "pool" or (k == "adapter" and p.get("op") == "pool"):
                c, h, w = ins[0]
                win = p["window"]
                st = p.get("stride") or win
                out = (c, (h - win) // st + 1, (w - win) // st + 1)
                total += out[0] * out[1] * out[2]
            elif k == "dense":
                d = ins[0][0]
                m = p["out_features"]
                out = (m,)
                total += 2 * d * m + (m if p.get("bias", True) else 0)
            elif k == "flatten":
                out = (int(np.prod(ins[0])),)
            elif k == "add":
                out = (p["channels"],) + tuple(ins[0][1:]) if p.get("maps") else ins[0]
                total += int(np.prod(out))
            elif k == "relu":
                out = ins[0]
                total += int(np.prod(out))
            elif k == "batchnorm":
                out = ins[0]
                total += 2 * int(np.prod(out))
            elif k == "dropout":
                out = ins[0]
            else:
                raise ValueError(k)
            shapes[node.id] = out
            done.add(node.id)
            pending.remove(node)
            progressed = True
        if not progressed:
            raise ValueError("cycle")
    return total
