"""Central finite-difference checks against the tape's analytic gradients."""
import numpy as np

from texlet.nn import tensor as T


def numeric_grad(f, leaves, h=1e-5, entries=None):
    """d f() / d leaf entries by central differences; ``entries`` picks flat indices per leaf."""
    out = []
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        idx = range(flat.size) if entries is None else entries[li]
        g = np.zeros(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(f().data)
            flat[i] = old - h
            down = float(f().data)
            flat[i] = old
            g[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(f, leaves, h=1e-5, max_per_leaf=None, seed=0):
    """max |analytic - numeric| / max |numeric| over the checked entries of every leaf."""
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    T.backward(loss)
    rng = np.random.default_rng(seed)
    entries = []
    for leaf in leaves:
        n = leaf.data.size
        if max_per_leaf is None or n <= max_per_leaf:
            entries.append(np.arange(n))
        else:
            entries.append(np.sort(rng.choice(n, max_per_leaf, replace=False)))
    analytic = [
        (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)[e]
        for leaf, e in zip(leaves, entries)
    ]
    numeric = numeric_grad(f, leaves, h, entries)
    a = np.concatenate(analytic)
    n = np.concatenate(numeric)
    scale = np.abs(n).max()
    return float(np.abs(a - n).max() / scale) if scale > 0 else float(np.abs(a).max())


def _leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def random_graph(seed):
    """Compose 4-12 random ops over (3, 4) leaves; returns (loss closure, leaves)."""
    rng = np.random.default_rng(seed)
    leaves = [_leaf(rng.standard_normal((3, 4))) for _ in range(3)]
    weight = _leaf(rng.standard_normal((4, 4)) * 0.5)
    gain, bias = _leaf(1 + 0.1 * rng.standard_normal(4)), _leaf(0.1 * rng.standard_normal(4))
    target = rng.standard_normal((3, 4))
    plan = [(int(rng.integers(0, 17)), rng.integers(0, 1 << 30, size=3)) for _ in range(rng.integers(4, 13))]

    def f():
        pool = list(leaves)
        for op, (i, j, k) in plan:
            a, b, c = pool[i % len(pool)], pool[j % len(pool)], pool[k % len(pool)]
            y = [
                lambda: T.add(a, b),
                lambda: T.sub(a, b),
                lambda: T.mul(a, b),
                lambda: T.square(T.tanh(a)),
                lambda: T.exp(T.tanh(a)),
                lambda: T.sigmoid(a),
                lambda: T.gelu(a),
                lambda: T.matmul(a, weight),
                lambda: T.softmax(a),
                lambda: T.layer_norm(a, gain, bias),
                lambda: T.scaled_dot_attention(a, b, c),
                lambda: T.matmul(a, T.matmul(T.swap_last(b), c)),
                lambda: T.take(T.concat([a, b], axis=0), np.array([0, 4, 2]), axis=0),
                lambda: T.reshape(T.transpose(T.reshape(a, (2, 6))), (3, 4)),
                lambda: T.sub(a, T.mean(a, axis=-1, keepdims=True)),
                lambda: T.mul(a, T.broadcast_to(T.sum(b, axis=0, keepdims=True), (3, 4))),
                lambda: T.tanh(T.add(a, T.mul(c, 0.5))),
            ][op]()
            pool.append(y)
        return T.add(T.mse(pool[-1], T.Tensor(target)), T.mean(T.mul(pool[-1], pool[len(pool) // 2])))

    return f, leaves + [weight, gain, bias]
