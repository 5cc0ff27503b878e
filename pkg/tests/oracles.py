"""Independent reference implementations used by the tests.

Everything here is written with plain loops or scalar math so that it shares
no code path with the vectorized implementations under test.
"""

import math

import numpy as np

from mvc import tensor as T


def rel_error(a, b) -> float:
    """max|a - b| / max(max|a|, max|b|), with 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array (mutated in place and restored)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            fp = f()
            a[idx] = orig - eps
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck(build, inputs, eps=1e-5):
    """Worst relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a scalar Tensor; ``inputs`` are float64 arrays.
    """
    with T.precision("float64"):
        tensors = [T.parameter(x) for x in inputs]
        build(*tensors).backward()
        analytic = [t.grad for t in tensors]

        def f():
            with T.no_grad():
                return build(*[T.Tensor(t.data) for t in tensors]).item()

        numeric = numeric_grad(f, [t.data for t in tensors], eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def naive_conv2d(x, k, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * k[o, ch, u, v]
                    out[b, o, i, j] = acc
    return out


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations; returns eigenvalues descending and column eigenvectors."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol * max(1.0, abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a)
    order = sorted(range(n), key=lambda i: -vals[i])
    return vals[order], v[:, order]


def brute_force_ap(scores, targets):
    """Precision at each positive's rank, counted directly. Ties go to the lower index."""
    n = len(scores)
    rank_of = {}
    for i in range(n):
        # items strictly ahead of i: higher score, or equal score with lower index
        ahead = sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
        rank_of[i] = ahead + 1
    positives = [i for i in range(n) if targets[i]]
    total = 0.0
    for i in positives:
        hits = sum(1 for j in positives if rank_of[j] <= rank_of[i])
        total += hits / rank_of[i]
    return total / len(positives)


def brute_force_macro_map(scores, targets):
    aps = []
    for c in range(targets.shape[1]):
        if targets[:, c].sum() > 0:
            aps.append(brute_force_ap(list(scores[:, c]), list(targets[:, c])))
    return sum(aps) / len(aps)


# sRGB (IEC 61966-2-1) primaries with D65 white, written out from the chromaticities
_XY = {"r": (0.64, 0.33), "g": (0.30, 0.60), "b": (0.15, 0.06), "w": (0.3127, 0.3290)}


def _srgb_matrix():
    def xyz(x, y):
        return np.array([x / y, 1.0, (1 - x - y) / y])

    prim = np.column_stack([xyz(*_XY[k]) for k in "rgb"])
    white = xyz(*_XY["w"])
    s = np.linalg.solve(prim, white)
    return prim * s


def cie_lab_pixel(r, g, b):
    """Scalar sRGB -> L*a*b* (D65) straight from the CIE formulas."""
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    m = _srgb_matrix()
    rgb = np.array([lin(r), lin(g), lin(b)])
    xyz = m @ rgb
    white = m @ np.ones(3)
    delta = 6 / 29

    def f(t):
        return t ** (1 / 3) if t > delta**3 else t / (3 * delta**2) + 4 / 29

    fx, fy, fz = (f(xyz[i] / white[i]) for i in range(3))
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def lab_to_rgb(lab):
    """Inverse of rgb_to_lab for a [3, H, W] array, using the same sRGB matrix convention."""
    from mvc.views import CIE_EPSILON, CIE_KAPPA, SRGB_TO_XYZ, WHITE_XYZ

    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[0] + 16) / 116
    fx = fy + lab[1] / 500
    fz = fy - lab[2] / 200

    def finv(f):
        return np.where(f**3 > CIE_EPSILON, f**3, (116 * f - 16) / CIE_KAPPA)

    y = np.where(lab[0] > CIE_KAPPA * CIE_EPSILON, fy**3, lab[0] / CIE_KAPPA)
    xyz = np.stack([finv(fx), y, finv(fz)]) * WHITE_XYZ[:, None, None]
    linear = np.einsum("ij,jhw->ihw", np.linalg.inv(SRGB_TO_XYZ), xyz)
    linear = np.clip(linear, 0, None)
    return np.where(linear <= 0.0031308, 12.92 * linear, 1.055 * linear ** (1 / 2.4) - 0.055)


class ReluPatterns:
    """Records the sign pattern of every relu input while active.

    Central differences are only valid when no relu changes side between the
    two probe points; coordinates where the patterns differ are skipped.
    """

    def __init__(self):
        self.patterns = []

    def __enter__(self):
        self._orig = T.relu

        def relu(a):
            a = T.as_tensor(a)
            self.patterns.append(np.packbits(a.data > 0).tobytes())
            return self._orig(a)

        T.relu = relu
        return self

    def __exit__(self, *exc):
        T.relu = self._orig

    def take(self):
        out, self.patterns = self.patterns, []
        return out


def sampled_gradcheck(loss_fn, params, per_tensor, rng, eps=1e-5):
    """(worst error, checked, skipped) of ``p.grad`` against central differences.

    Up to ``per_tensor`` coordinates of each param are probed; ``loss_fn()``
    evaluates the scalar loss from the current parameter data. Each error is
    scaled by the largest analytic gradient entry of its tensor, so near-zero
    coordinates do not inflate the ratio.
    """
    worst, checked, skipped = 0.0, 0, 0
    with ReluPatterns() as relus:
        for p in params:
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            scale = np.abs(p.grad).max()
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_fn()
                plus = relus.take()
                flat[i] = orig - eps
                fm = loss_fn()
                minus = relus.take()
                flat[i] = orig
                if plus != minus:
                    skipped += 1
                    continue
                num = (fp - fm) / (2 * eps)
                denom = max(scale, abs(num))
                checked += 1
                if denom > 0:
                    worst = max(worst, abs(p.grad.reshape(-1)[i] - num) / denom)
    return worst, checked, skipped


def cmc_gradient_error(stage_widths, embedding_dim=None, size=8, per_tensor=None, seed=0, positive="live", d_h=8):
    """Worst FD-vs-tape error of the symmetric contrastive loss through a CmcModel on a 4-chip batch.

    ``per_tensor=None`` checks every coordinate of every parameter.
    """
    from mvc.contrastive import ContrastiveConfig, MemoryBank, symmetric_loss
    from mvc.nn import CmcModel

    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        model = CmcModel.for_views(
            5, 5, d_h=d_h, seed=seed, stage_widths=stage_widths,
            embedding_dim=embedding_dim or stage_widths[-1],
        )
        v1, v2 = rng.standard_normal((4, 5, size, size)), rng.standard_normal((4, 5, size, size))
        bank = MemoryBank(12, d_h, seed=seed)
        cfg = ContrastiveConfig(k=6, tau=0.5)
        indices = np.array([0, 3, 5, 9])
        neg_idx = rng.integers(0, 12, size=(4, 6))

        def loss():
            h1, h2 = model(v1, v2)
            return symmetric_loss(h1, h2, bank, cfg, indices=indices, neg_idx=neg_idx, positive=positive)

        model.zero_grad()
        loss().backward()
        params = model.parameters()

        def value():
            with T.no_grad():
                return loss().item()

        n = per_tensor or max(p.size for p in params)
        return sampled_gradcheck(value, params, n, rng)
