"""Slow reference implementations used only by the tests."""
import numpy as np


def brute_conv3d(x, w, b, dilation=1, padding=((0, 0), (0, 0), (0, 0)), stride=(1, 1, 1)):
    """Nested-loop convolution straight from the definition (zero padding)."""
    n, c_in, L, H, W = x.shape
    c_out, _, kt, kh, kw = w.shape
    (pt0, pt1), (ph0, ph1), (pw0, pw1) = padding
    st, sh, sw = stride
    oT = (L + pt0 + pt1 - dilation * (kt - 1) - 1) // st + 1
    oH = (H + ph0 + ph1 - (kh - 1) - 1) // sh + 1
    oW = (W + pw0 + pw1 - (kw - 1) - 1) // sw + 1
    out = np.zeros((n, c_out, oT, oH, oW))
    for i in range(n):
        for o in range(c_out):
            for t in range(oT):
                for y in range(oH):
                    for z in range(oW):
                        acc = b[o]
                        for ci in range(c_in):
                            for a in range(kt):
                                ti = t * st + dilation * a - pt0
                                if not 0 <= ti < L:
                                    continue
                                for p in range(kh):
                                    yi = y * sh + p - ph0
                                    if not 0 <= yi < H:
                                        continue
                                    for q in range(kw):
                                        zi = z * sw + q - pw0
                                        if 0 <= zi < W:
                                            acc += x[i, ci, ti, yi, zi] * w[o, ci, a, p, q]
                        out[i, o, t, y, z] = acc
    return out


def brute_maxpool(x, kernel, stride, padding, dilation=1):
    """Window scan returning max values and the lowest flat index achieving them."""
    n, c, L, H, W = x.shape
    (pt0, pt1), (ph0, ph1), (pw0, pw1) = padding
    kt, kh, kw = kernel
    st, sh, sw = stride
    oT = (L + pt0 + pt1 - dilation * (kt - 1) - 1) // st + 1
    oH = (H + ph0 + ph1 - kh) // sh + 1
    oW = (W + pw0 + pw1 - kw) // sw + 1
    out = np.zeros((n, c, oT, oH, oW))
    arg = np.zeros(out.shape, dtype=np.int64)
    for i in range(n):
        for ch in range(c):
            for t in range(oT):
                for y in range(oH):
                    for z in range(oW):
                        cells = []
                        for a in range(kt):
                            ti = t * st + dilation * a - pt0
                            for p in range(kh):
                                yi = y * sh + p - ph0
                                for q in range(kw):
                                    zi = z * sw + q - pw0
                                    if 0 <= ti < L and 0 <= yi < H and 0 <= zi < W:
                                        flat = np.ravel_multi_index((i, ch, ti, yi, zi), x.shape)
                                        cells.append((flat, x[i, ch, ti, yi, zi]))
                        best = max(v for _, v in cells)
                        out[i, ch, t, y, z] = best
                        arg[i, ch, t, y, z] = min(f for f, v in cells if v == best)
    return out, arg


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    """max |a-b| / max(|a|, |b|) with a small floor, the usual gradient-check metric."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / denom)
