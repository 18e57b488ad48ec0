"""Convolutional LSTM layer.

At every step the previous hidden state and the current input are stacked
along channels, ``z = [y_{t-1}, x_t]``, and four same-padded convolutions of
``z`` drive the gates::

    fg  = sigmoid(conv(z, w_fg) + b_fg)
    in  = sigmoid(conv(z, w_in) + b_in)
    S~  = tanh(conv(z, w_s) + b_s)
    S_t = fg * S_{t-1} + in * S~          (elementwise)
    out = sigmoid(conv(z, w_out) + b_out)
    y_t = out * tanh(S_t)

The four kernels are stacked so a step costs one matmul.  The ``*_cf``
functions work on channels-first sequences ``(c, n_t, n, h, w)``; the public
functions take channels-last ``(n_t, h, w, c)`` or ``(n, n_t, h, w, c)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ShapeError, conv_cf, conv_cf_backward, kernel_grad, kernel_matrix, sigmoid

GATES = ("fg", "in", "s", "out")


@dataclass
class ConvLstmParams:
    w_fg: np.ndarray
    b_fg: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_s: np.ndarray
    b_s: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def kernel_size(self) -> int:
        return self.w_fg.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_fg.shape[3]

    @property
    def in_channels(self) -> int:
        return self.w_fg.shape[2] - self.hidden

    def check(self) -> None:
        k = self.kernel_size
        if self.w_fg.ndim != 4 or k % 2 == 0 or self.w_fg.shape[1] != k:
            raise ShapeError(f"kernels must be (k, k, c_in + c_h, c_h) with odd k, got {self.w_fg.shape}")
        for g in GATES:
            w, b = getattr(self, f"w_{g}"), getattr(self, f"b_{g}")
            if w.shape != self.w_fg.shape:
                raise ShapeError(f"w_{g} shape {w.shape} != w_fg shape {self.w_fg.shape}")
            if b.shape != (self.hidden,):
                raise ShapeError(f"b_{g} shape {b.shape} != ({self.hidden},)")

    def stacked(self, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """Gate kernels as one ``(4 c_h, k*k*(c_h + c_in))`` matrix plus bias."""
        w = np.concatenate([getattr(self, f"w_{g}") for g in GATES], axis=-1)
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return kernel_matrix(w).astype(dtype, copy=False), b.astype(dtype, copy=False)

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "") -> "ConvLstmParams":
        return cls(**{f"{p}_{g}": d[f"{prefix}{p}_{g}"] for g in GATES for p in ("w", "b")})

    def to_dict(self, prefix: str = "") -> dict:
        return {f"{prefix}{p}_{g}": getattr(self, f"{p}_{g}") for g in GATES for p in ("w", "b")}


@dataclass
class ConvLstmState:
    y: np.ndarray  # hidden, channels-last (..., h, w, c_hidden)
    s: np.ndarray  # cell memory, same shape

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "ConvLstmState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def _step_cf(x_t, y_prev, s_prev, kmat, bias, k, ch):
    z = np.concatenate([y_prev, x_t], axis=0)
    a = conv_cf(z, kmat, bias, k)
    gates = sigmoid(a)
    fg, ig, og = gates[:ch], gates[ch:2 * ch], gates[3 * ch:]
    cand = np.tanh(a[2 * ch:3 * ch])
    s = fg * s_prev + ig * cand
    ts = np.tanh(s)
    return og * ts, s, (z, fg, ig, cand, og, ts)


def convlstm_forward_cf(seq: np.ndarray, params: ConvLstmParams, return_sequences: bool = True,
                        record: bool = False):
    """Channels-first run from a zero state; ``seq`` is ``(c_in, n_t, n, h, w)``.

    Returns the hidden states ``(c_h, n_t, n, h, w)`` (or the last one,
    ``(c_h, n, h, w)``) and, with ``record``, a tape for the backward pass.
    """
    c_in, n_t, n, h, w = seq.shape
    ch, k = params.hidden, params.kernel_size
    kmat, bias = params.stacked(seq.dtype)
    y = np.zeros((ch, n, h, w), dtype=seq.dtype)
    s = np.zeros_like(y)
    ys = np.empty((ch, n_t, n, h, w), dtype=seq.dtype) if return_sequences else None
    steps = []
    for t in range(n_t):
        s_prev = s
        y, s, cache = _step_cf(seq[:, t], y, s, kmat, bias, k, ch)
        if return_sequences:
            ys[:, t] = y
        if record:
            steps.append((s_prev,) + cache)
    out = ys if return_sequences else y
    return (out, (steps, kmat, k, return_sequences)) if record else out


def convlstm_backward_cf(dout: np.ndarray, tape, need_input_grad: bool = True):
    """Backpropagation through time for :func:`convlstm_forward_cf`.

    Returns ``(dseq, grads)`` with ``grads`` keyed ``w_fg``, ``b_fg``, ...
    """
    steps, kmat, k, return_sequences = tape
    ch = kmat.shape[0] // 4
    n_t = len(steps)
    dk = np.zeros_like(kmat)
    db = np.zeros(kmat.shape[0], dtype=kmat.dtype)
    dy_rec = np.zeros_like(steps[0][0])
    ds_next = np.zeros_like(dy_rec)
    dseq = None
    if need_input_grad:
        z0 = steps[0][1]
        dseq = np.empty((z0.shape[0] - ch, n_t) + z0.shape[1:], dtype=kmat.dtype)
    for t in reversed(range(n_t)):
        s_prev, z, fg, ig, cand, og, ts = steps[t]
        if return_sequences:
            dy = dy_rec + dout[:, t]
        elif t == n_t - 1:
            dy = dy_rec + dout
        else:
            dy = dy_rec
        ds = ds_next + dy * og * (1.0 - ts * ts)
        da = np.concatenate([
            ds * s_prev * fg * (1.0 - fg),
            ds * cand * ig * (1.0 - ig),
            ds * ig * (1.0 - cand * cand),
            dy * ts * og * (1.0 - og),
        ], axis=0)
        ds_next = ds * fg
        dz, dk_t, db_t = conv_cf_backward(da, z, kmat, k)
        dk += dk_t
        db += db_t
        dy_rec = dz[:ch]
        if need_input_grad:
            dseq[:, t] = dz[ch:]
    c_z = kmat.shape[1] // (k * k)
    dw = kernel_grad(dk, (k, k, c_z, 4 * ch))
    grads = {}
    for i, g in enumerate(GATES):
        grads[f"w_{g}"] = np.ascontiguousarray(dw[..., i * ch:(i + 1) * ch])
        grads[f"b_{g}"] = db[i * ch:(i + 1) * ch].copy()
    return dseq, grads


def _to_cf(seq: np.ndarray) -> tuple[np.ndarray, bool]:
    single = seq.ndim == 4
    if single:
        seq = seq[None]
    if seq.ndim != 5:
        raise ShapeError(f"sequence must be (n_t, h, w, c) or (n, n_t, h, w, c), got {seq.shape}")
    return np.ascontiguousarray(seq.transpose(4, 1, 0, 2, 3)), single


def _seq_from_cf(out: np.ndarray, sequences: bool, single: bool) -> np.ndarray:
    # (c, n_t, n, h, w) -> (n, n_t, h, w, c); (c, n, h, w) -> (n, h, w, c)
    out = out.transpose(2, 1, 3, 4, 0) if sequences else out.transpose(1, 2, 3, 0)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def convlstm_cell_step(x_t: np.ndarray, state: ConvLstmState, params: ConvLstmParams) -> ConvLstmState:
    """One time step; ``x_t`` is ``(h, w, c_in)`` or batched ``(n, h, w, c_in)``."""
    params.check()
    if x_t.shape[-1] != params.in_channels:
        raise ShapeError(f"input has {x_t.shape[-1]} channels, cell expects {params.in_channels}")
    if state.y.shape != x_t.shape[:-1] + (params.hidden,) or state.s.shape != state.y.shape:
        raise ShapeError(f"state shapes {state.y.shape}/{state.s.shape} do not match input {x_t.shape}")
    single = x_t.ndim == 3

    def cf(a):
        a = a[None] if single else a
        return np.ascontiguousarray(a.transpose(3, 0, 1, 2))

    def cl(a):
        a = np.ascontiguousarray(a.transpose(1, 2, 3, 0))
        return a[0] if single else a

    kmat, bias = params.stacked(x_t.dtype)
    y, s, _ = _step_cf(cf(x_t), cf(state.y), cf(state.s), kmat, bias, params.kernel_size, params.hidden)
    return ConvLstmState(cl(y), cl(s))


def convlstm_forward(seq: np.ndarray, params: ConvLstmParams, return_sequences: bool = True,
                     record: bool = False):
    """Fold the cell over ``seq`` from a zero state (channels-last).

    ``seq`` is ``(n_t, h, w, c_in)`` or ``(n, n_t, h, w, c_in)``; any ``n_t >= 1``.
    Returns all hidden states with the time axis in place, or only the last.
    With ``record`` a tape for :func:`convlstm_backward` is returned as well.
    """
    params.check()
    cf, single = _to_cf(seq)
    if cf.shape[1] < 1:
        raise ShapeError("sequence needs at least one time step")
    if cf.shape[0] != params.in_channels:
        raise ShapeError(f"input has {cf.shape[0]} channels, layer expects {params.in_channels}")
    res = convlstm_forward_cf(cf, params, return_sequences, record)
    out, tape = res if record else (res, None)
    out = _seq_from_cf(out, return_sequences, single)
    return (out, (tape, single)) if record else out


def convlstm_backward(dout: np.ndarray, tape, need_input_grad: bool = True):
    """Channels-last counterpart of :func:`convlstm_backward_cf`."""
    tape, single = tape
    return_sequences = tape[3]
    d = dout[None] if single else dout
    d = d.transpose(4, 1, 0, 2, 3) if return_sequences else d.transpose(3, 0, 1, 2)
    dseq, grads = convlstm_backward_cf(np.ascontiguousarray(d), tape, need_input_grad)
    if dseq is not None:
        dseq = _seq_from_cf(dseq, True, single)
    return dseq, grads
