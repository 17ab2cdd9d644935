"""Multi-scale TCN + LSTM position regressors with hand-derived gradients.

All tensors are float64 with axes ``[batch, time, channels]``.  Four model
kinds share the building blocks:

``MSTL``
    K parallel TCNs (k = 1..K dilated layers) concatenated channel-wise and
    fed to an LSTM; an affine head maps the final hidden state to (x, y).
``LSTM_ONLY``
    The LSTM and head applied to the raw 3-feature windows.
``TCN_ONLY``
    One TCN with ``ceil(log2 T)`` layers; head on the last time step.
``MSTT``
    The multi-scale layer followed by one such TCN instead of the LSTM.

Parameters live in a plain ``dict`` whose insertion order is the canonical
enumeration order used by the optimizer and the checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

KINDS = ("MSTL", "LSTM_ONLY", "TCN_ONLY", "MSTT")
CHECKPOINT_MAGIC = b"MSTL1"

ParameterSet = dict  # name -> np.ndarray, ordered


class ReceptiveFieldWarning(UserWarning):
    """Window size and TCN depth are not paired as T = 2**K."""


# ------------------------------------------------------------------------- specs


@dataclass(frozen=True)
class TcnSpec:
    k: int
    channels: int
    kernel_size: int = 2
    residual: bool = True

    def __post_init__(self):
        if self.k < 1 or self.channels < 1:
            raise ValueError(f"TcnSpec needs k >= 1 and channels >= 1, got {self}")
        if self.kernel_size != 2:
            raise ValueError("only kernel_size=2 is supported")

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(2**j for j in range(self.k))

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one position regressor.

    ``out_offset``/``out_scale`` are fixed (untrained) constants applied to the
    head output, ``pos = offset + scale * head(h)``; training fits them to the
    label statistics so the network works in unit scale.
    """

    kind: str
    T: int
    K: int = 1
    M: int = 10
    hidden: int = 200
    output_dim: int = 2
    residual: bool = True
    in_channels: int = 3
    out_offset: tuple = (0.0, 0.0)
    out_scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; valid: {', '.join(KINDS)}")
        if self.T < 1 or self.K < 1 or self.M < 1 or self.hidden < 1:
            raise ValueError(f"model dimensions must be positive: {self}")
        object.__setattr__(self, "out_offset", tuple(float(v) for v in self.out_offset))
        object.__setattr__(self, "out_scale", tuple(float(v) for v in self.out_scale))
        if len(self.out_offset) != self.output_dim or len(self.out_scale) != self.output_dim:
            raise ValueError("out_offset/out_scale must match output_dim")

    @property
    def multiscale(self) -> list[TcnSpec]:
        return [TcnSpec(k, self.M, residual=self.residual) for k in range(1, self.K + 1)]

    @property
    def feature_dim(self) -> int:
        """Channels entering the LSTM (or the top TCN for MSTT)."""
        if self.kind in ("MSTL", "MSTT"):
            return sum(s.channels for s in self.multiscale)
        return self.in_channels

    @property
    def top_tcn(self) -> TcnSpec:
        return TcnSpec(max(1, math.ceil(math.log2(self.T))), self.M, residual=self.residual)

    def check(self) -> list[str]:
        """Warn about window/depth pairings that leave the receptive field mismatched."""
        notes = []
        if self.T & (self.T - 1):
            notes.append(f"window T={self.T} is not a power of two")
        if self.kind in ("MSTL", "MSTT") and self.T != 2**self.K:
            notes.append(
                f"window T={self.T} differs from the deepest TCN's receptive field 2**K={2**self.K}"
            )
        for n in notes:
            warnings.warn(n, ReceptiveFieldWarning, stacklevel=2)
        return notes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("out_offset", "out_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ------------------------------------------------------------------ primitives


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _delay(x, d):
    out = np.zeros_like(x)
    if d < x.shape[1]:
        out[:, d:] = x[:, : x.shape[1] - d]
    return out


def causal_conv1d(x, kernel, bias, dilation):
    """Kernel-2 causal dilated convolution.

    ``out[s, t] = bias + x[s, t - d] @ kernel[0] + x[s, t] @ kernel[1]`` with
    zeros for ``t - d < 0``.
    """
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if x.ndim != 3:
        raise ValueError(f"input must be [S, T, C], got shape {x.shape}")
    if kernel.ndim != 3 or kernel.shape[0] != 2:
        raise ValueError(f"kernel must be [2, C_in, C_out], got shape {kernel.shape}")
    if kernel.shape[1] != x.shape[2]:
        raise ValueError(
            f"channel axis mismatch: input C_in={x.shape[2]}, kernel C_in={kernel.shape[1]}"
        )
    if np.shape(bias) != (kernel.shape[2],):
        raise ValueError(f"bias must be [C_out={kernel.shape[2]}], got shape {np.shape(bias)}")
    if int(dilation) < 1:
        raise ValueError("dilation must be >= 1")
    return _delay(x, int(dilation)) @ kernel[0] + x @ kernel[1] + bias


def _conv_backward(g, x, xd, kernel, d, need_dx=True):
    c_in, c_out = kernel.shape[1:]
    g2 = g.reshape(-1, c_out)
    gk = np.stack([xd.reshape(-1, c_in).T @ g2, x.reshape(-1, c_in).T @ g2])
    gb = g2.sum(axis=0)
    if not need_dx:
        return None, gk, gb
    dx = g @ kernel[1].T
    back = g @ kernel[0].T
    T = x.shape[1]
    if d < T:
        dx[:, : T - d] += back[:, d:]
    return dx, gk, gb


# ------------------------------------------------------------------------- TCN


def tcn_param_shapes(spec: TcnSpec, c_in: int, prefix: str):
    shapes = []
    for j in range(spec.k):
        cin = c_in if j == 0 else spec.channels
        shapes.append((f"{prefix}.{j}.w", (2, cin, spec.channels)))
        shapes.append((f"{prefix}.{j}.b", (spec.channels,)))
        if spec.residual and cin != spec.channels:
            shapes.append((f"{prefix}.{j}.proj", (cin, spec.channels)))
    return shapes


def _tcn_forward(spec: TcnSpec, x, params, prefix):
    caches = []
    for j, d in enumerate(spec.dilations):
        w, b = params[f"{prefix}.{j}.w"], params[f"{prefix}.{j}.b"]
        xd = _delay(x, d)
        z = xd @ w[0] + x @ w[1] + b
        proj = params.get(f"{prefix}.{j}.proj")
        if proj is not None:
            z = z + x @ proj
        elif spec.residual:
            z = z + x
        y = np.maximum(z, 0.0)
        caches.append((x, xd, z > 0))
        x = y
    return x, caches


def _tcn_backward(spec: TcnSpec, g, caches, params, prefix, grads, need_dx=True):
    for j in reversed(range(spec.k)):
        x, xd, active = caches[j]
        g = g * active
        w = params[f"{prefix}.{j}.w"]
        want_dx = need_dx or j > 0
        dx, gk, gb = _conv_backward(g, x, xd, w, spec.dilations[j], want_dx)
        grads[f"{prefix}.{j}.w"] = gk
        grads[f"{prefix}.{j}.b"] = gb
        proj = params.get(f"{prefix}.{j}.proj")
        if proj is not None:
            grads[f"{prefix}.{j}.proj"] = x.reshape(-1, x.shape[2]).T @ g.reshape(-1, g.shape[2])
            if want_dx:
                dx = dx + g @ proj.T
        elif spec.residual and want_dx:
            dx = dx + g
        g = dx
    return g


def tcn_forward(spec: TcnSpec, x, params, prefix="tcn"):
    """Stack of ``spec.k`` causal convolutions with dilations 1, 2, ..., 2**(k-1)."""
    out, _ = _tcn_forward(spec, np.asarray(x, dtype=float), params, prefix)
    return out


def _multiscale_forward(specs, x, params, prefix):
    outs, caches = [], []
    for i, s in enumerate(specs):
        o, c = _tcn_forward(s, x, params, f"{prefix}.{i}")
        outs.append(o)
        caches.append(c)
    return np.concatenate(outs, axis=2), caches


def _multiscale_backward(specs, g, caches, params, prefix, grads, need_dx=False):
    dx = None
    start = 0
    for i, s in enumerate(specs):
        gi = g[:, :, start : start + s.channels]
        start += s.channels
        d = _tcn_backward(s, gi, caches[i], params, f"{prefix}.{i}", grads, need_dx)
        if need_dx:
            dx = d if dx is None else dx + d
    return dx


def multiscale_forward(specs, x, params, prefix="ms"):
    """Run every TCN in ``specs`` on the same input; concatenate along channels."""
    if not specs:
        raise ValueError("multiscale layer needs at least one TCN")
    out, _ = _multiscale_forward(specs, np.asarray(x, dtype=float), params, prefix)
    return out


# ------------------------------------------------------------------------ LSTM


def _lstm_forward(x, W, U, b):
    S, T, _ = x.shape
    H = U.shape[0]
    xw = np.ascontiguousarray((x @ W + b).transpose(1, 0, 2))  # [T, S, 4H]
    gates = np.empty((T, S, 4 * H))  # activated i, f, g, o
    cs = np.zeros((T + 1, S, H))
    hs = np.zeros((T + 1, S, H))
    tcs = np.empty((T, S, H))
    for t in range(T):
        a = xw[t]
        a += hs[t] @ U
        gt = gates[t]
        g_pre = a[:, 2 * H : 3 * H].copy()
        # logistic on all four blocks, then overwrite the candidate block with tanh
        np.multiply(a, 0.5, out=gt)
        np.tanh(gt, out=gt)
        gt *= 0.5
        gt += 0.5
        np.tanh(g_pre, out=gt[:, 2 * H : 3 * H])
        c = cs[t + 1]
        np.multiply(gt[:, H : 2 * H], cs[t], out=c)
        c += gt[:, :H] * gt[:, 2 * H : 3 * H]
        np.tanh(c, out=tcs[t])
        np.multiply(gt[:, 3 * H :], tcs[t], out=hs[t + 1])
    cache = (gates, cs, hs, tcs)
    return np.ascontiguousarray(hs[1:].transpose(1, 0, 2)), cache


def _lstm_backward(x, W, U, cache, dh_seq=None, dh_last=None, need_dx=True):
    S, T, D = x.shape
    H = U.shape[0]
    gates, cs, hs, tcs = cache
    da_all = np.empty((T, S, 4 * H))
    dh = np.zeros((S, H))
    dc = np.zeros((S, H))
    UT = np.ascontiguousarray(U.T)
    for t in reversed(range(T)):
        gt = gates[t]
        i, f, g, o = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
        tc = tcs[t]
        if dh_seq is not None:
            dh = dh + dh_seq[:, t]
        if dh_last is not None and t == T - 1:
            dh = dh + dh_last
        dc = dc + dh * o * (1.0 - tc * tc)
        da = da_all[t]
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        da[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dh = da @ UT
        dc = dc * f
    dU = hs[:-1].reshape(-1, H).T @ da_all.reshape(-1, 4 * H)
    db = da_all.reshape(-1, 4 * H).sum(axis=0)
    dxw = np.ascontiguousarray(da_all.transpose(1, 0, 2))  # [S, T, 4H]
    dW = x.reshape(-1, D).T @ dxw.reshape(-1, 4 * H)
    dx = dxw @ W.T if need_dx else None
    return dx, dW, dU, db


def lstm_forward(x, hidden, params, prefix="lstm"):
    """Single-layer LSTM unrolled over the time axis, zero initial state.

    Gate order in the stacked weights is input, forget, candidate, output.
    Returns ``(hidden_sequence [S, T, H], final_hidden [S, H])``.
    """
    W, U, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    if U.shape != (hidden, 4 * hidden):
        raise ValueError(f"recurrent weights have shape {U.shape}, expected {(hidden, 4 * hidden)}")
    hs, _ = _lstm_forward(np.asarray(x, dtype=float), W, U, b)
    return hs, hs[:, -1]


# ----------------------------------------------------------------------- model


def param_shapes(spec: ModelSpec):
    shapes = []
    if spec.kind in ("MSTL", "MSTT"):
        for i, s in enumerate(spec.multiscale):
            shapes += tcn_param_shapes(s, spec.in_channels, f"ms.{i}")
    if spec.kind in ("MSTL", "LSTM_ONLY"):
        D, H = spec.feature_dim, spec.hidden
        shapes += [("lstm.W", (D, 4 * H)), ("lstm.U", (H, 4 * H)), ("lstm.b", (4 * H,))]
        head_in = H
    else:
        shapes += tcn_param_shapes(spec.top_tcn, spec.feature_dim, "tcn")
        head_in = spec.M
    shapes += [("head.w", (head_in, spec.output_dim)), ("head.b", (spec.output_dim,))]
    return shapes


def parameter_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(spec))


def init_params(spec: ModelSpec, seed: int = 0) -> ParameterSet:
    """Glorot-uniform weights, zero biases, forget-gate bias of 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "b":
            p = np.zeros(shape)
            if name == "lstm.b":
                H = shape[0] // 4
                p[H : 2 * H] = 1.0
        else:
            if len(shape) == 3:  # conv kernel [taps, in, out]
                fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            p = rng.uniform(-lim, lim, size=shape)
        params[name] = p
    return params


@dataclass
class _Cache:
    x: np.ndarray
    ms: list = None
    feats: np.ndarray = None
    lstm: list = None
    tcn: list = None
    top: np.ndarray = None


def _forward(spec: ModelSpec, x, params):
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[1] != spec.T or x.shape[2] != spec.in_channels:
        raise ValueError(
            f"input must be [S, T={spec.T}, C={spec.in_channels}], got shape {x.shape}"
        )
    cache = _Cache(x)
    feats = x
    if spec.kind in ("MSTL", "MSTT"):
        feats, cache.ms = _multiscale_forward(spec.multiscale, x, params, "ms")
    cache.feats = feats
    if spec.kind in ("MSTL", "LSTM_ONLY"):
        hs, cache.lstm = _lstm_forward(feats, params["lstm.W"], params["lstm.U"], params["lstm.b"])
        top = hs[:, -1]
    else:
        out, cache.tcn = _tcn_forward(spec.top_tcn, feats, params, "tcn")
        top = out[:, -1]
    cache.top = top
    z = top @ params["head.w"] + params["head.b"]
    pos = np.asarray(spec.out_offset) + np.asarray(spec.out_scale) * z
    return pos, cache


def _backward(spec: ModelSpec, cache: _Cache, params, grad_out):
    grads = {}
    dz = np.asarray(grad_out, dtype=float) * np.asarray(spec.out_scale)
    grads["head.w"] = cache.top.T @ dz
    grads["head.b"] = dz.sum(axis=0)
    dtop = dz @ params["head.w"].T
    need_feat_grad = spec.kind in ("MSTL", "MSTT")
    if spec.kind in ("MSTL", "LSTM_ONLY"):
        dfeat, dW, dU, db = _lstm_backward(
            cache.feats, params["lstm.W"], params["lstm.U"], cache.lstm,
            dh_last=dtop, need_dx=need_feat_grad,
        )
        grads["lstm.W"], grads["lstm.U"], grads["lstm.b"] = dW, dU, db
    else:
        g = np.zeros(cache.feats.shape[:2] + (spec.M,))
        g[:, -1] = dtop
        dfeat = _tcn_backward(spec.top_tcn, g, cache.tcn, params, "tcn", grads, need_feat_grad)
    if need_feat_grad:
        _multiscale_backward(spec.multiscale, dfeat, cache.ms, params, "ms", grads)
    return {name: grads[name] for name in params}


def model_forward(spec: ModelSpec, x, params) -> np.ndarray:
    """Predicted positions ``[S, 2]`` for windows ``x`` of shape ``[S, T, 3]``."""
    return _forward(spec, x, params)[0]


def model_backward(spec: ModelSpec, x, params, grad_out) -> ParameterSet:
    """Gradient of a scalar loss w.r.t. every parameter, given dLoss/dOutput."""
    _, cache = _forward(spec, x, params)
    return _backward(spec, cache, params, grad_out)


def lstm_input(spec: ModelSpec, x, params) -> np.ndarray:
    """The tensor the LSTM consumes (the multi-scale feature maps for MSTL)."""
    if spec.kind == "MSTL":
        return multiscale_forward(spec.multiscale, x, params)
    if spec.kind == "LSTM_ONLY":
        return np.asarray(x, dtype=float)
    raise ValueError(f"{spec.kind} has no LSTM")


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path, spec: ModelSpec, params: ParameterSet, meta=None) -> Path:
    """Write ``MSTL1`` + u64 header length + JSON header + float64 LE payload."""
    entries, offset = [], 0
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size * 8
    header = {
        "version": 1,
        "spec": spec.to_dict(),
        "params": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(spec, params, meta)``."""
    data = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if data[:n] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:n]!r})")
    (hlen,) = struct.unpack("<Q", data[n : n + 8])
    header = json.loads(data[n + 8 : n + 8 + hlen].decode("utf-8"))
    payload = data[n + 8 + hlen :]
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = arr.astype(float).reshape(e["shape"])
    return ModelSpec.from_dict(header["spec"]), params, header.get("meta", {})
