"""Dense float64 layers with explicit forward/backward passes.

Arrays are plain ``numpy.ndarray`` objects.  Image-like activations use a
batched channels-last layout ``(N, H, W, C)``.  Every ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` consumes the upstream
gradient and that cache.

LSTM weights are packed as one ``(d + H, 4H)`` matrix over the concatenation
``[x, h]``, gate blocks ordered ``(i, f, g, o)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

GATE_ORDER = ("i", "f", "g", "o")


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- conv2d


def _shifted_columns(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # (N, H, W, 9*Cin), tap-major then channel, matching w.reshape(9*Cin, Cout)
    taps = [xp[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(taps, axis=-1)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: (N, H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout,)
    """
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: x{x.shape} w{w.shape} b{b.shape}")
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _shifted_columns(xp, h, wd).reshape(n * h * wd, 9 * cin)
    out = cols @ w.reshape(9 * cin, cout) + b
    return out.reshape(n, h, wd, cout), (x.shape, cols, w)


def conv2d_backward(dout: np.ndarray, cache):
    xshape, cols, w = cache
    n, h, wd, cin = xshape
    cout = w.shape[3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(n, h, wd, 9, cin)
    dxp = np.zeros((n, h + 2, wd + 2, cin))
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + wd, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dw, db


# ---------------------------------------------------------------- relu


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return dout * mask


# ---------------------------------------------------------------- maxpool2d


def maxpool2d_forward(x: np.ndarray):
    """2x2 window, stride 2.  Ties go to the first maximizer in row-major order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    (n, h, w, c), idx = cache
    dwin = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


# ---------------------------------------------------------------- dense


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (..., n) @ w: (n, m) + b: (m,)"""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, w.shape[0])
    d2 = dout.reshape(-1, w.shape[1])
    return (d2 @ w.T).reshape(x.shape), x2.T @ d2, d2.sum(axis=0)


# ---------------------------------------------------------------- set max-pooling


def set_maxpool_forward(features: np.ndarray):
    """Elementwise max over the rows of a (n, d) set; first index wins ties."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError("set_maxpool needs a non-empty (n, d) set")
    idx = features.argmax(axis=0)
    # + 0.0 folds -0.0 into 0.0 so the result's bits do not depend on row order
    return features[idx, np.arange(features.shape[1])] + 0.0, (features.shape, idx)


def set_maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, idx = cache
    dx = np.zeros(shape)
    dx[idx, np.arange(shape[1])] = dout
    return dx


# ---------------------------------------------------------------- lstm


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError("LstmState h and c must have equal length")

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(np.zeros(hidden), np.zeros(hidden))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_step_forward(x: np.ndarray, state: LstmState, w: np.ndarray, b: np.ndarray):
    hdim = state.h.shape[0]
    if w.shape != (x.shape[0] + hdim, 4 * hdim) or b.shape != (4 * hdim,):
        raise ShapeError(f"lstm: x{x.shape} h{state.h.shape} w{w.shape} b{b.shape}")
    xh = np.concatenate([x, state.h])
    z = xh @ w + b
    i = sigmoid(z[:hdim])
    f = sigmoid(z[hdim:2 * hdim])
    g = np.tanh(z[2 * hdim:3 * hdim])
    o = sigmoid(z[3 * hdim:])
    c = f * state.c + i * g
    tc = np.tanh(c)
    h = o * tc
    return LstmState(h, c), (xh, state.c, i, f, g, o, tc)


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache, w: np.ndarray):
    """Returns (dx, dh_prev, dc_prev, dw, db)."""
    xh, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)])
    dw = np.outer(xh, dz)
    dxh = w @ dz
    d = xh.shape[0] - i.shape[0]
    return dxh[:d], dxh[d:], dc * f, dw, dz


def lstm_step(x: np.ndarray, state: LstmState, w: np.ndarray, b: np.ndarray) -> LstmState:
    return lstm_step_forward(x, state, w, b)[0]


def lstm_sequence_forward(xs, w: np.ndarray, b: np.ndarray):
    """Fold the cell over ``xs`` from a zero state; returns (h_T, caches)."""
    if len(xs) == 0:
        raise ShapeError("lstm_sequence needs at least one input")
    state = LstmState.zeros(b.shape[0] // 4)
    caches = []
    for x in xs:
        state, cache = lstm_step_forward(np.asarray(x, dtype=np.float64), state, w, b)
        caches.append(cache)
    return state.h, caches


def lstm_sequence_backward(dh_last: np.ndarray, caches, w: np.ndarray):
    """BPTT.  Returns (dxs as (T, d) array, dw, db)."""
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[1])
    dh = dh_last
    dc = np.zeros_like(dh_last)
    dxs = []
    for cache in reversed(caches):
        dx, dh, dc, dwt, dbt = lstm_step_backward(dh, dc, cache, w)
        dw += dwt
        db += dbt
        dxs.append(dx)
    return np.stack(dxs[::-1]), dw, db


# ---------------------------------------------------------------- softmax / loss


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, label: int):
    """Softmax cross-entropy of one logit vector.  Returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    logz = np.log(np.exp(shifted).sum())
    loss = logz - shifted[label]
    grad = np.exp(shifted - logz)
    grad[label] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], tuple],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(value, grads)`` with ``grads`` keyed like
    ``params``.  Arrays in ``params`` are perturbed in place and restored.
    The error for one tensor is ``max|a - n| / max(1e-8, max|a| + max|n|)``
    over the checked coordinates; the report keeps the worst tensor.
    When ``max_coords`` is set, at most that many coordinates per tensor are
    drawn at random.
    """
    _, analytic = f(params)
    rng = rng or np.random.default_rng(0)
    per = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = np.asarray(analytic[name]).reshape(-1)[coords]
        num = np.empty(len(coords))
        for k, j in enumerate(coords):
            old = flat[j]
            flat[j] = old + h
            fp = f(params)[0]
            flat[j] = old - h
            fm = f(params)[0]
            flat[j] = old
            num[k] = (fp - fm) / (2 * h)
        denom = max(1e-8, float(np.abs(a).max(initial=0.0) + np.abs(num).max(initial=0.0)))
        per[name] = float(np.abs(a - num).max(initial=0.0)) / denom
    return GradCheckReport(max(per.values(), default=0.0), per, tol)
