"""Slow, definition-level reference implementations used by the tests."""
import numpy as np

from lesionforge.nn_core import LayerSpec, backprop, xavier_init


def forward64(layers, x):
    a = np.asarray(x, dtype=np.float64)
    for layer in layers:
        z = a @ layer.weights.astype(np.float64).T + layer.biases.astype(np.float64)
        if layer.activation == "sigmoid":
            a = 1.0 / (1.0 + np.exp(-z))
        elif layer.activation == "softmax":
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
        else:
            a = z
    return a


def window(vol2d, yc, xc, p):
    h = p // 2
    return vol2d[yc - h:yc + h + 1, xc - h:xc + h + 1]


def patch_error_at(study, net, p, z, yc, xc, names=("FLAIR", "T2")):
    """E array (p, p) for the window centered at (yc, xc) of slice z."""
    wins = [window(study.sequences[n][z], yc, xc, p).astype(np.float64) for n in names]
    recon = forward64(net.layers, np.concatenate([w.ravel() for w in wins]))
    recon = recon.reshape(len(names), p, p)
    return sum((recon[k] - wins[k]) ** 2 for k in range(len(names)))


def naive_nd(study, net, p, z, y, x):
    """Mean of the patch error over the window: (1 / 2p^2) * sum E."""
    return patch_error_at(study, net, p, z, y, x).sum() / (2 * p * p)


def naive_cnd(study, net, p, z, y, x):
    """Direct double sum over every window center whose window holds (y, x)."""
    h = p // 2
    ny, nx = study.shape[1:]
    total = 0.0
    for yc in range(y - h, y + h + 1):
        for xc in range(x - h, x + h + 1):
            if h <= yc < ny - h and h <= xc < nx - h:
                E = patch_error_at(study, net, p, z, yc, xc)
                total += E[y - yc + h, x - xc + h]
    return total


def exhaustive_otsu(values, bins=256):
    """Scan every candidate split of a ``bins``-bin histogram; first maximum wins."""
    values = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    centers = (edges[:-1] + edges[1:]) / 2
    n = counts.sum()
    best, best_k = -1.0, None
    for k in range(bins):
        c0, c1 = counts[:k + 1], counts[k + 1:]
        n0, n1 = c0.sum(), c1.sum()
        if n0 == 0 or n1 == 0:
            continue
        mu0 = (c0 * centers[:k + 1]).sum() / n0
        mu1 = (c1 * centers[k + 1:]).sum() / n1
        between = (n0 / n) * (n1 / n) * (mu0 - mu1) ** 2
        if between > best * (1 + 1e-12):
            best, best_k = between, k
    return edges[best_k + 1]


def dice_by_hand(pred, truth, classes):
    p = {i for i, v in enumerate(np.ravel(pred)) if v in classes}
    g = {i for i, v in enumerate(np.ravel(truth)) if v in classes}
    if not p and not g:
        return None
    return 2 * len(p & g) / (len(p) + len(g))


# ten constructed label pairs with hand-computed region scores
DICE_CASES = [
    ([1, 2, 3, 4], [1, 2, 3, 4], {"WT": 1.0, "TC": 1.0, "AT": 1.0}),
    ([0, 0, 0, 0], [0, 0, 0, 0], {"WT": None, "TC": None, "AT": None}),
    ([2, 2, 0, 0], [0, 0, 2, 2], {"WT": 0.0, "TC": None, "AT": None}),
    ([2, 2, 2, 2], [1, 1, 1, 1], {"WT": 1.0, "TC": 0.0, "AT": None}),
    ([4, 4, 0, 0], [4, 0, 0, 0], {"WT": 2 / 3, "TC": 2 / 3, "AT": 2 / 3}),
    ([1, 3, 4, 2], [3, 1, 2, 4], {"WT": 1.0, "TC": 2 * 2 / 6, "AT": 0.0}),
    ([0, 0, 0, 4], [0, 0, 0, 0], {"WT": 0.0, "TC": 0.0, "AT": 0.0}),
    ([2, 0, 0, 0], [2, 2, 0, 0], {"WT": 2 / 3, "TC": None, "AT": None}),
    ([1, 1, 3, 0], [3, 3, 3, 2], {"WT": 2 * 3 / 7, "TC": 2 * 3 / 6, "AT": None}),
    ([4, 3, 2, 1, 0, 0], [4, 4, 2, 0, 0, 1], {"WT": 2 * 3 / 8, "TC": 2 * 2 / 6, "AT": 2 / 3}),
]


def random_net(rng, widths, last="linear", dtype=np.float64):
    layers = []
    for k, (a, b) in enumerate(zip(widths, widths[1:])):
        act = last if k == len(widths) - 2 else "sigmoid"
        layer = xavier_init(LayerSpec(a, b, act), rng, dtype=dtype)
        layer.biases[...] = rng.normal(0, 0.3, b)
        layers.append(layer)
    return layers


def numeric_grads(net, x, target, loss, l2, step=1e-3):
    """Central finite differences of the mean batch loss, one parameter at a time."""
    out = []
    for layer in net:
        grads = []
        for param in (layer.weights, layer.biases):
            g = np.zeros_like(param, dtype=np.float64)
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = param[i]
                param[i] = orig + step
                up, _ = backprop(net, x, target, loss, l2)
                param[i] = orig - step
                down, _ = backprop(net, x, target, loss, l2)
                param[i] = orig
                g[i] = (up - down) / (2 * step)
            grads.append(g)
        out.append(tuple(grads))
    return out


def assert_grads_close(analytic, numeric):
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            err = np.abs(a - n)
            ok = (err <= 1e-4 * np.abs(n)) | (err <= 1e-7)
            assert ok.all(), f"max abs err {err.max()}"
