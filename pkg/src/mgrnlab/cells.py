"""GRU, LSTM, channel-wise LSTM and mGRN: forward passes and exact BPTT.

Windows are batched as ``(B, T, M)`` arrays. Inside, several independent
cells of the same kind (the marginal blocks of a grouped model) are stacked
on a leading "block" axis ``D`` and run together; groups of unequal size are
zero-padded to the widest group, which leaves both outputs and gradients
unchanged because padded inputs are identically zero.

Gate weights of a stacked cell are fused column-wise: for a GRU the packed
input matrix is ``[W_r^T | W_z^T | W_h^T]`` with shape ``(D, m, 3H)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .params import GRU_GATES, LSTM_GATES, ModelSpec, Params
from .tensor import ShapeError, sigmoid

__all__ = [
    "gru_step",
    "lstm_step",
    "mgrn_step",
    "cwlstm_forward",
    "forward_batch",
    "forward_window",
    "loss_and_grad",
    "backward_window",
]


# --------------------------------------------------------------------------- packing

@dataclass
class _Packed:
    W: np.ndarray  # (G, D, m_max + 1, H); the last input row is the bias
    U: np.ndarray  # (G, D, H, H)


def _pack(blocks: Sequence[Mapping[str, np.ndarray]], gates: Sequence[str], m_max: int) -> _Packed:
    H = blocks[0][f"U_{gates[0]}"].shape[0]
    G, D = len(gates), len(blocks)
    W = np.zeros((G, D, m_max + 1, H))
    U = np.empty((G, D, H, H))
    for d, blk in enumerate(blocks):
        for gi, g in enumerate(gates):
            w = blk[f"W_{g}"]
            W[gi, d, : w.shape[1]] = w.T
            W[gi, d, -1] = blk[f"b_{g}"]
            U[gi, d] = blk[f"U_{g}"].T
    return _Packed(W, U)


def _unpack(blocks: Sequence[Mapping[str, np.ndarray]], gates: Sequence[str], dW, dU):
    for d, blk in enumerate(blocks):
        for gi, g in enumerate(gates):
            w = blk[f"W_{g}"]
            w[...] = dW[gi, d, : w.shape[1]].T
            blk[f"b_{g}"][...] = dW[gi, d, -1]
            blk[f"U_{g}"][...] = dU[gi, d].T


def _with_ones(x: np.ndarray) -> np.ndarray:
    """Append the constant input that carries the bias row of packed weights."""
    out = np.ones(x.shape[:-1] + (x.shape[-1] + 1,))
    out[..., :-1] = x
    return out


def _sigmoid_(a: np.ndarray) -> np.ndarray:
    """In-place logistic via ``(1 + tanh(a/2)) / 2``; cannot overflow."""
    a *= 0.5
    np.tanh(a, out=a)
    a *= 0.5
    a += 0.5
    return a


def _input_proj(pk: _Packed, x: np.ndarray) -> np.ndarray:
    """Per-gate affine input terms ``(G, D, T, B, H)`` of a ones-augmented x."""
    D, T, B, m = x.shape
    xr = x.reshape(D, T * B, m)
    G, H = pk.W.shape[0], pk.W.shape[-1]
    out = np.empty((G, D, T * B, H))
    for g in range(G):
        np.matmul(xr, pk.W[g], out=out[g])
    return out.reshape(G, D, T, B, H)


def _weight_grads(x, h_prev, dpre, drec):
    """Gradients of packed weights (bias rows included).

    x (D,T,B,m+1) ones-augmented; h_prev (D,T,B,H); dpre (G,D,T,B,H) pre-activation grads;
    drec (G,D,T,B,H) grads flowing through each ``h_prev @ U_g`` product.
    """
    D, T, B, m = x.shape
    G, H = dpre.shape[0], dpre.shape[-1]
    xt = x.reshape(D, T * B, m).transpose(0, 2, 1)
    ht = h_prev.reshape(D, T * B, H).transpose(0, 2, 1)
    dW = np.empty((G, D, m, H))
    dU = np.empty((G, D, H, H))
    for g in range(G):
        np.matmul(xt, dpre[g].reshape(D, T * B, H), out=dW[g])
        np.matmul(ht, drec[g].reshape(D, T * B, H), out=dU[g])
    return dW, dU


# --------------------------------------------------------------------------- stacked GRU

def _gru_forward(pk: _Packed, x: np.ndarray, h0: np.ndarray | None = None):
    """Run D stacked GRU cells over x (D,T,B,m); returns h, candidates, cache."""
    x = _with_ones(x)
    D, T, B, _ = x.shape
    H = pk.U.shape[-1]
    xw = _input_proj(pk, x)
    h = np.zeros((D, B, H)) if h0 is None else np.array(h0, dtype=np.float64)
    hs = np.empty((D, T, B, H))
    hcs = np.empty((D, T, B, H))
    rs = np.empty((D, T, B, H))
    zs = np.empty((D, T, B, H))
    qs = np.empty((D, T, B, H))
    Ur, Uz, Uh = pk.U
    for t in range(T):
        r = np.matmul(h, Ur)
        r += xw[0, :, t]
        _sigmoid_(r)
        z = np.matmul(h, Uz)
        z += xw[1, :, t]
        _sigmoid_(z)
        q = np.matmul(h, Uh)
        hc = r * q
        hc += xw[2, :, t]
        np.tanh(hc, out=hc)
        h = (1.0 - z) * h + z * hc
        hs[:, t], hcs[:, t], rs[:, t], zs[:, t], qs[:, t] = h, hc, r, z, q
    h_prev = np.empty_like(hs)
    h_prev[:, 0] = 0.0 if h0 is None else h0
    h_prev[:, 1:] = hs[:, :-1]
    return hs, hcs, (x, h_prev, rs, zs, qs, hcs)


def _gru_backward(pk: _Packed, cache, dh_ext=None, dhc_ext=None):
    """Packed weight gradients given external grads on states and candidates."""
    x, h_prev, rs, zs, qs, hcs = cache
    D, T, B, H = h_prev.shape
    dpre = np.empty((3, D, T, B, H))
    drec = np.empty((3, D, T, B, H))
    UrT, UzT, UhT = (u.transpose(0, 2, 1) for u in pk.U)
    dh = np.zeros((D, B, H))
    for t in reversed(range(T)):
        if dh_ext is not None:
            dh = dh + dh_ext[:, t]
        r, z, q, hc = rs[:, t], zs[:, t], qs[:, t], hcs[:, t]
        dhc = dh * z
        if dhc_ext is not None:
            dhc += dhc_ext[:, t]
        da_h = dhc * (1.0 - hc * hc)
        da_r = da_h * q
        da_r *= r * (1.0 - r)
        da_z = dh * (hc - h_prev[:, t])
        da_z *= z * (1.0 - z)
        dq = da_h * r
        dpre[0, :, t], dpre[1, :, t], dpre[2, :, t] = da_r, da_z, da_h
        drec[2, :, t] = dq
        dh = dh * (1.0 - z)
        dh += np.matmul(da_r, UrT)
        dh += np.matmul(da_z, UzT)
        dh += np.matmul(dq, UhT)
    drec[:2] = dpre[:2]
    return _weight_grads(x, h_prev, dpre, drec)


# --------------------------------------------------------------------------- stacked LSTM

def _lstm_forward(pk: _Packed, x: np.ndarray, h0=None, c0=None):
    """Run D stacked LSTM cells over x (D,T,B,m); returns h and c sequences, cache."""
    x = _with_ones(x)
    D, T, B, _ = x.shape
    H = pk.U.shape[-1]
    xw = _input_proj(pk, x)
    h = np.zeros((D, B, H)) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros((D, B, H)) if c0 is None else np.array(c0, dtype=np.float64)
    hs = np.empty((D, T, B, H))
    cs = np.empty((D, T, B, H))
    h_prev = np.empty((D, T, B, H))
    c_prev = np.empty((D, T, B, H))
    acts = np.empty((4, D, T, B, H))
    for t in range(T):
        h_prev[:, t] = h
        c_prev[:, t] = c
        gate = []
        for g in range(4):
            a = np.matmul(h, pk.U[g])
            a += xw[g, :, t]
            if g < 3:
                _sigmoid_(a)
            else:
                np.tanh(a, out=a)
            acts[g, :, t] = a
            gate.append(a)
        i, f, o, cand = gate
        c = f * c + i * cand
        h = o * np.tanh(c)
        hs[:, t], cs[:, t] = h, c
    return hs, cs, (x, h_prev, c_prev, acts, cs)


def _lstm_backward(pk: _Packed, cache, dh_ext, want_dx=False):
    x, h_prev, c_prev, acts, cs = cache
    D, T, B, H = h_prev.shape
    dpre = np.empty((4, D, T, B, H))
    UT = [u.transpose(0, 2, 1) for u in pk.U]
    dh = np.zeros((D, B, H))
    dc = np.zeros((D, B, H))
    for t in reversed(range(T)):
        dh += dh_ext[:, t]
        i, f, o, g = acts[:, :, t]
        tc = np.tanh(cs[:, t])
        do = dh * tc
        dc += dh * o * (1.0 - tc * tc)
        dpre[0, :, t] = dc * g * i * (1.0 - i)
        dpre[1, :, t] = dc * c_prev[:, t] * f * (1.0 - f)
        dpre[2, :, t] = do * o * (1.0 - o)
        dpre[3, :, t] = dc * i * (1.0 - g * g)
        dc *= f
        dh = np.matmul(dpre[0, :, t], UT[0])
        for k in range(1, 4):
            dh += np.matmul(dpre[k, :, t], UT[k])
    grads = _weight_grads(x, h_prev, dpre, dpre)
    if not want_dx:
        return grads
    m = x.shape[-1] - 1
    dx = np.zeros((D, T * B, m))
    for k in range(4):
        dx += np.matmul(dpre[k].reshape(D, T * B, H), pk.W[k, :, :m].transpose(0, 2, 1))
    return grads, dx.reshape(D, T, B, m)


# --------------------------------------------------------------------------- helpers

def _check_windows(spec: ModelSpec, windows: np.ndarray, check_length=True) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ShapeError(f"windows must be (batch, steps, inputs), got {windows.shape}")
    if windows.shape[2] != spec.n_inputs:
        raise ShapeError(f"window width {windows.shape[2]} != model inputs {spec.n_inputs}")
    if check_length and windows.shape[1] != spec.lookback:
        raise ShapeError(f"window length {windows.shape[1]} != lookback {spec.lookback}")
    return windows


def _group_inputs(spec: ModelSpec, windows: np.ndarray) -> np.ndarray:
    """(B,T,M) -> (K,T,B,m_max), padding short groups with zero columns."""
    B, T, M = windows.shape
    m_max = max(spec.grouping.sizes)
    idx = np.full((len(spec.grouping), m_max), M)
    for k, g in enumerate(spec.grouping.groups):
        idx[k, : len(g)] = g
    padded = np.concatenate([windows, np.zeros((B, T, 1))], axis=2)
    return padded[:, :, idx].transpose(2, 1, 0, 3)


def _mgrn_blocks(params: Params, K: int):
    return [params.block(f"mgrn.group{k}") for k in range(K)]


def _cw_blocks(params: Params, K: int):
    return [params.block(f"cwlstm.group{k}.{d}") for k in range(K) for d in ("fwd", "bwd")]


# --------------------------------------------------------------------------- architectures

def _recurrent_forward(spec: ModelSpec, params: Params, windows: np.ndarray):
    """Final hidden state (B, N) of the recurrent block plus a backward cache."""
    B, T, M = windows.shape
    x_seq = windows.transpose(1, 0, 2)  # (T,B,M)
    if spec.arch in ("gru", "lstm"):
        gates = GRU_GATES if spec.arch == "gru" else LSTM_GATES
        blocks = [params.block(spec.arch)]
        pk = _pack(blocks, gates, M)
        run = _gru_forward if spec.arch == "gru" else _lstm_forward
        hs, _, cache = run(pk, x_seq[None])
        return hs[0, -1], (pk, cache)

    K = len(spec.grouping)
    xg = _group_inputs(spec, windows)
    m_max = xg.shape[-1]
    N = spec.hidden
    if spec.arch == "mgrn":
        blocks = _mgrn_blocks(params, K)
        pk = _pack(blocks, GRU_GATES, m_max)
        _, hcs, mcache = _gru_forward(pk, xg)
        Nt = hcs.shape[-1]
        hc_cat = hcs.transpose(1, 2, 0, 3).reshape(T, B, K * Nt)
        Uc = np.concatenate([params[f"mgrn.joint.group{k}.U_c"].T for k in range(K)], axis=0)
        cand = np.tanh(hc_cat @ Uc + params["mgrn.joint.b_c"])
        xz = x_seq @ params["mgrn.joint.W_z"].T + params["mgrn.joint.b_z"]
        UzT = params["mgrn.joint.U_z"].T
        H = np.zeros((B, N))
        Hp = np.empty((T, B, N))
        Zs = np.empty((T, B, N))
        for t in range(T):
            Hp[t] = H
            Z = sigmoid(xz[t] + H @ UzT)
            H = (1.0 - Z) * H + Z * cand[t]
            Zs[t] = Z
        Uz = params["mgrn.joint.U_z"].copy()
        return H, (pk, mcache, x_seq, hc_cat, Uc, Uz, cand, Hp, Zs)

    # cwlstm: interleaved blocks (group k forward at 2k, backward at 2k+1)
    blocks = _cw_blocks(params, K)
    pk = _pack(blocks, LSTM_GATES, m_max)
    xin = np.repeat(xg, 2, axis=0)
    xin[1::2] = xin[1::2, ::-1]
    hs, _, mcache = _lstm_forward(pk, xin)
    hs[1::2] = hs[1::2, ::-1]
    Nt = hs.shape[-1]
    joint_in = hs.transpose(1, 2, 0, 3).reshape(1, T, B, 2 * K * Nt)
    jblocks = [params.block("cwlstm.joint")]
    jpk = _pack(jblocks, LSTM_GATES, 2 * K * Nt)
    jhs, _, jcache = _lstm_forward(jpk, joint_in)
    return jhs[0, -1], (pk, mcache, jpk, jcache)


def _recurrent_backward(spec: ModelSpec, grads: Params, cache, dH: np.ndarray):
    """Fill ``grads`` (recurrent tensors) from the gradient on the final state."""
    if spec.arch in ("gru", "lstm"):
        pk, c = cache
        T = c[1].shape[1]
        dh_ext = np.zeros((1, T) + dH.shape)
        dh_ext[0, -1] = dH
        if spec.arch == "gru":
            dW, dU = _gru_backward(pk, c, dh_ext=dh_ext)
        else:
            dW, dU = _lstm_backward(pk, c, dh_ext)
        _unpack([grads.block(spec.arch)], GRU_GATES if spec.arch == "gru" else LSTM_GATES, dW, dU)
        return

    K = len(spec.grouping)
    if spec.arch == "mgrn":
        pk, mcache, x_seq, hc_cat, Uc, Uz, cand, Hp, Zs = cache
        T, B, N = Hp.shape
        da_Z = np.empty((T, B, N))
        dcand = np.empty((T, B, N))
        dh = dH
        for t in reversed(range(T)):
            Z = Zs[t]
            dcand[t] = dh * Z
            da_Z[t] = dh * (cand[t] - Hp[t]) * Z * (1.0 - Z)
            dh = dh * (1.0 - Z) + da_Z[t] @ Uz
        flat = lambda a: a.reshape(T * B, a.shape[-1])  # noqa: E731
        grads["mgrn.joint.W_z"] = flat(da_Z).T @ flat(x_seq)
        grads["mgrn.joint.U_z"] = flat(da_Z).T @ flat(Hp)
        grads["mgrn.joint.b_z"] = da_Z.sum(axis=(0, 1))
        da_c = dcand * (1.0 - cand * cand)
        grads["mgrn.joint.b_c"] = da_c.sum(axis=(0, 1))
        dUc = flat(hc_cat).T @ flat(da_c)  # (K*Nt, N)
        Nt = hc_cat.shape[-1] // K
        for k in range(K):
            grads[f"mgrn.joint.group{k}.U_c"] = dUc[k * Nt:(k + 1) * Nt].T
        dhc = (da_c @ Uc.T).reshape(T, B, K, Nt).transpose(2, 0, 1, 3)
        dW, dU = _gru_backward(pk, mcache, dhc_ext=dhc)
        _unpack(_mgrn_blocks(grads, K), GRU_GATES, dW, dU)
        return

    pk, mcache, jpk, jcache = cache
    T = jcache[1].shape[1]
    B, N = dH.shape
    dh_ext = np.zeros((1, T, B, N))
    dh_ext[0, -1] = dH
    (dW, dU), dx = _lstm_backward(jpk, jcache, dh_ext, want_dx=True)
    _unpack([grads.block("cwlstm.joint")], LSTM_GATES, dW, dU)
    Nt = pk.U.shape[-1]
    dhs = dx[0].reshape(T, B, 2 * K, Nt).transpose(2, 0, 1, 3).copy()
    dhs[1::2] = dhs[1::2, ::-1]
    dW, dU = _lstm_backward(pk, mcache, dhs)
    _unpack(_cw_blocks(grads, K), LSTM_GATES, dW, dU)



# --------------------------------------------------------------------------- public API

def forward_batch(spec: ModelSpec, params: Params, windows: np.ndarray) -> np.ndarray:
    """Predictions ``(B,)`` for windows ``(B, lookback, M)`` from zero initial states."""
    windows = _check_windows(spec, windows)
    h, _ = _recurrent_forward(spec, params, windows)
    return h @ params["head.w"][0] + params["head.b"][0]


def forward_window(spec: ModelSpec, params: Params, window: np.ndarray) -> float:
    """Scalar prediction for one ``(lookback, M)`` window."""
    return float(forward_batch(spec, params, np.asarray(window, dtype=np.float64)[None])[0])


def loss_and_grad(spec: ModelSpec, params: Params, windows: np.ndarray, targets: np.ndarray,
                  weights: np.ndarray | None = None) -> tuple[float, Params]:
    """Mean squared error over the batch and its exact gradient.

    With ``weights`` the loss is ``sum(w * (pred - target)**2)`` instead.
    """
    windows = _check_windows(spec, windows)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.shape[0] != windows.shape[0]:
        raise ShapeError("one target per window is required")
    if weights is None:
        weights = np.full(targets.shape, 1.0 / targets.size)
    h, cache = _recurrent_forward(spec, params, windows)
    w = params["head.w"][0]
    resid = h @ w + params["head.b"][0] - targets
    loss = float(np.sum(weights * resid * resid))
    dpred = 2.0 * weights * resid
    grads = params.zeros_like()
    grads["head.w"] = (dpred @ h)[None]
    grads["head.b"] = [dpred.sum()]
    _recurrent_backward(spec, grads, cache, np.outer(dpred, w))
    return loss, grads


def backward_window(spec: ModelSpec, params: Params, window: np.ndarray, target: float) -> Params:
    """Gradient of ``(prediction - target)**2`` for a single window."""
    window = np.asarray(window, dtype=np.float64)[None]
    _, grads = loss_and_grad(spec, params, window, [target], weights=np.ones(1))
    return grads


# --------------------------------------------------------------------------- single steps

def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    return (v[None], True) if v.ndim == 1 else (v, False)


def gru_step(p: Mapping[str, np.ndarray], x_t, h_prev) -> np.ndarray:
    """One GRU update; ``p`` maps ``W_r, U_r, b_r, ...`` to arrays.

    ``x_t``/``h_prev`` may be vectors or ``(B, .)`` batches.
    """
    x, single = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    M, N = p["W_r"].shape[1], p["U_r"].shape[0]
    if x.shape[-1] != M or h.shape[-1] != N or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_step: x{np.shape(x_t)}, h{np.shape(h_prev)} vs W{p['W_r'].shape}")
    hs, _, _ = _gru_forward(_pack([p], GRU_GATES, M), x[None, None], h[None])
    out = hs[0, 0]
    return out[0] if single else out


def lstm_step(p: Mapping[str, np.ndarray], x_t, h_prev, c_prev) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update returning ``(h_t, c_t)``."""
    x, single = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    c, _ = _as_batch(c_prev)
    M, N = p["W_i"].shape[1], p["U_i"].shape[0]
    if x.shape[-1] != M or h.shape[-1] != N or c.shape != h.shape:
        raise ShapeError(f"lstm_step: x{np.shape(x_t)}, h{np.shape(h_prev)}, c{np.shape(c_prev)}")
    hs, cs, _ = _lstm_forward(_pack([p], LSTM_GATES, M), x[None, None], h[None], c[None])
    if single:
        return hs[0, 0, 0], cs[0, 0, 0]
    return hs[0, 0], cs[0, 0]


def mgrn_step(spec: ModelSpec, params: Params, x_t, marginal_h_prev: Sequence, joint_h_prev):
    """One mGRN update.

    Returns ``(marginal_h, joint_h, marginal_candidates)``; the joint block
    sees only the marginal candidate memories.
    """
    if spec.arch != "mgrn":
        raise ValueError("mgrn_step needs an mgrn spec")
    x = np.asarray(x_t, dtype=np.float64)
    K = len(spec.grouping)
    if x.shape != (spec.n_inputs,) or len(marginal_h_prev) != K:
        raise ShapeError(f"mgrn_step: x{x.shape}, {len(marginal_h_prev)} marginal states, K={K}")
    hm = np.stack([np.asarray(h, dtype=np.float64) for h in marginal_h_prev])[:, None]
    if hm.shape[-1] != spec.marginal_dim or np.shape(joint_h_prev) != (spec.hidden,):
        raise ShapeError("mgrn_step: state width mismatch")
    xg = _group_inputs(spec, x[None, None])
    pk = _pack(_mgrn_blocks(params, K), GRU_GATES, xg.shape[-1])
    hs, hcs, _ = _gru_forward(pk, xg, hm)
    marginal_h = [hs[k, 0, 0] for k in range(K)]
    cands = [hcs[k, 0, 0] for k in range(K)]
    pre_c = params["mgrn.joint.b_c"].copy()
    for k in range(K):
        pre_c = pre_c + params[f"mgrn.joint.group{k}.U_c"] @ cands[k]
    joint_cand = np.tanh(pre_c)
    H = np.asarray(joint_h_prev, dtype=np.float64)
    z = sigmoid(params["mgrn.joint.W_z"] @ x + params["mgrn.joint.U_z"] @ H + params["mgrn.joint.b_z"])
    return marginal_h, (1.0 - z) * H + z * joint_cand, cands


def cwlstm_forward(spec: ModelSpec, params: Params, window) -> np.ndarray:
    """Final joint hidden state of a channel-wise LSTM over a ``(T, M)`` window."""
    if spec.arch != "cwlstm":
        raise ValueError("cwlstm_forward needs a cwlstm spec")
    windows = _check_windows(spec, np.asarray(window, dtype=np.float64)[None], check_length=False)
    h, _ = _recurrent_forward(spec, params, windows)
    return h[0]
