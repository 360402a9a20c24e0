"""Hot loops for the ReLU network engine.

Parameters of a network live in one flat float64 vector.  Layer ``l`` maps
``sizes[l]`` inputs to ``sizes[l+1]`` outputs and occupies
``theta[offsets[l]:offsets[l+1]]``: first the row-major weight matrix
``A_l`` of shape ``(sizes[l+1], sizes[l])``, then the bias ``b_l``.

Every kernel exists twice.  The ``*_jit`` versions are compiled by numba
(matrix products via BLAS, everything elementwise as loops, the epoch loop
itself native); the ``*_numpy`` versions are the vectorised fallback driven
from Python.  Both compute the same quantities up to summation order.

The trained predictor is the general form

    g(x) = v . F(x) + u * clip(h(x))

which covers a bare network (p = 0, u = 1), the scratch baseline and the
residual-integration model.  ``F`` holds precomputed representation rows.
"""

import numpy as np

from ._accel import HAVE_NUMBA, USE_NUMBA, njit


def layer_offsets(sizes):
    sizes = np.asarray(sizes, dtype=np.int64)
    out = np.zeros(len(sizes), dtype=np.int64)
    for l in range(len(sizes) - 1):
        out[l + 1] = out[l] + sizes[l + 1] * sizes[l] + sizes[l + 1]
    return out


# ----------------------------------------------------------------------------
# numba kernels
# ----------------------------------------------------------------------------


def _affine_rows(a, theta, off, din, dout, relu, out):
    """``out = a @ A.T + b`` accumulated as ``b + A[:,0] a_0 + A[:,1] a_1 ...``.

    The fixed order makes zero padding exact and keeps this kernel
    bit-identical to :func:`_forward_numpy`.  Zero inputs are skipped, which
    cannot change any sum.
    """
    boff = off + din * dout
    AT = theta[off:boff].reshape((dout, din)).T.copy()
    for i in range(a.shape[0]):
        for j in range(dout):
            out[i, j] = theta[boff + j]
        for k in range(din):
            ak = a[i, k]
            if ak == 0.0:
                continue
            for j in range(dout):
                out[i, j] += AT[k, j] * ak
        if relu:
            for j in range(dout):
                if out[i, j] < 0.0:
                    out[i, j] = 0.0


def _forward_jit(theta, sizes, offsets, X, clip):
    n = X.shape[0]
    nl = sizes.shape[0] - 1
    out = np.empty(n)
    chunk = 1024
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        a = np.ascontiguousarray(X[start:stop])
        for l in range(nl):
            z = np.empty((stop - start, sizes[l + 1]))
            _affine_rows_kernel(a, theta, offsets[l], sizes[l], sizes[l + 1],
                                l < nl - 1, z)
            a = z
        for i in range(stop - start):
            h = a[i, 0]
            if clip:
                if h > 1.0:
                    h = 1.0
                elif h < -1.0:
                    h = -1.0
            out[start + i] = h
    return out


def _batch_grad_jit(theta, sizes, offsets, X, F, y, idx, v, u, clip,
                    grad, gv):
    """Mean-squared-loss gradients over rows ``idx``.

    ``grad`` and ``gv`` are overwritten.  Returns ``(loss_sum, grad_u)``.
    The forward half matches :func:`_forward_jit` bit for bit; the backward
    half uses BLAS products.
    """
    m = idx.shape[0]
    nl = sizes.shape[0] - 1
    p = v.shape[0]
    a0 = np.empty((m, sizes[0]))
    for ii in range(m):
        for k in range(sizes[0]):
            a0[ii, k] = X[idx[ii], k]
    acts = [a0]
    for l in range(nl):
        z = np.empty((m, sizes[l + 1]))
        _affine_rows_kernel(acts[l], theta, offsets[l], sizes[l], sizes[l + 1],
                            l < nl - 1, z)
        acts.append(z)

    delta = np.empty((m, 1))
    loss = 0.0
    gu = 0.0
    for t in range(p):
        gv[t] = 0.0
    for ii in range(m):
        i = idx[ii]
        h = acts[nl][ii, 0]
        hc = h
        dh = 1.0
        if clip:
            if h >= 1.0:
                hc = 1.0 if h > 1.0 else h
                dh = 0.0
            elif h <= -1.0:
                hc = -1.0 if h < -1.0 else h
                dh = 0.0
        pred = u * hc
        for t in range(p):
            pred += v[t] * F[i, t]
        r = pred - y[i]
        loss += r * r
        coef = 2.0 * r / m
        for t in range(p):
            gv[t] += coef * F[i, t]
        gu += coef * hc
        delta[ii, 0] = coef * u * dh

    for l in range(nl - 1, -1, -1):
        din = sizes[l]
        dout = sizes[l + 1]
        off = offsets[l]
        boff = off + din * dout
        gA = np.dot(delta.T, acts[l]).ravel()
        for t in range(din * dout):
            grad[off + t] = gA[t]
        for j in range(dout):
            s = 0.0
            for ii in range(m):
                s += delta[ii, j]
            grad[boff + j] = s
        if l > 0:
            A = theta[off:boff].reshape((dout, din))
            nd = np.dot(delta, A)
            # post-ReLU activation is positive exactly where the unit is live
            ap = acts[l]
            for ii in range(m):
                for k in range(din):
                    if ap[ii, k] <= 0.0:
                        nd[ii, k] = 0.0
            delta = nd
    return loss, gu


def _project(theta, v, u, bound):
    for t in range(theta.shape[0]):
        if theta[t] > bound:
            theta[t] = bound
        elif theta[t] < -bound:
            theta[t] = -bound
    nv = 0.0
    for t in range(v.shape[0]):
        nv += v[t] * v[t]
    if nv > 1.0:
        scale = 1.0 / np.sqrt(nv)
        for t in range(v.shape[0]):
            v[t] *= scale
    if u[0] > 1.0:
        u[0] = 1.0
    elif u[0] < -1.0:
        u[0] = -1.0


def _epoch_jit(theta, vel, sizes, offsets, X, F, y, v, vel_v, u, vel_u,
                 perm, batch_size, lr, mom, bound, clip, train_v, train_u):
    """One pass of projected momentum SGD.  Mutates parameters in place.

    ``u`` and ``vel_u`` are length-1 arrays.  Returns the sample-weighted
    mean of the minibatch losses seen during the pass.
    """
    n = perm.shape[0]
    grad = np.zeros_like(theta)
    gv = np.zeros_like(v)
    total = 0.0
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        loss, gu = _batch_grad_kernel(theta, sizes, offsets, X, F, y,
                                      perm[start:stop], v, u[0], clip, grad, gv)
        total += loss
        for t in range(theta.shape[0]):
            vel[t] = mom * vel[t] - lr * grad[t]
            theta[t] += vel[t]
        if train_v:
            for t in range(v.shape[0]):
                vel_v[t] = mom * vel_v[t] - lr * gv[t]
                v[t] += vel_v[t]
        if train_u:
            vel_u[0] = mom * vel_u[0] - lr * gu
            u[0] += vel_u[0]
        _project_kernel(theta, v, u, bound)
        start = stop
    return total / n


# ----------------------------------------------------------------------------
# vectorised numpy kernels
# ----------------------------------------------------------------------------


def _layers_view(theta, sizes, offsets):
    out = []
    for l in range(len(sizes) - 1):
        din, dout = int(sizes[l]), int(sizes[l + 1])
        off = int(offsets[l])
        A = theta[off:off + din * dout].reshape(dout, din)
        b = theta[off + din * dout:off + din * dout + dout]
        out.append((A, b))
    return out


def _forward_numpy(theta, sizes, offsets, X, clip):
    layers = _layers_view(theta, sizes, offsets)
    a = X
    for l, (A, b) in enumerate(layers):
        a = _affine_numpy(a, A, b, l < len(layers) - 1)
    h = a[:, 0].copy()
    if clip:
        np.clip(h, -1.0, 1.0, out=h)
    return h


def _affine_numpy(a, A, b, relu):
    z = np.repeat(b[None, :], a.shape[0], axis=0)
    for k in range(A.shape[1]):
        z += a[:, k:k + 1] * A[:, k]
    return np.maximum(z, 0.0) if relu else z


def _batch_grad_numpy(theta, sizes, offsets, X, F, y, idx, v, u, clip,
                      grad, gv):
    layers = _layers_view(theta, sizes, offsets)
    gview = _layers_view(grad, sizes, offsets)
    m = idx.shape[0]
    acts = [X[idx]]
    for l, (A, b) in enumerate(layers):
        acts.append(_affine_numpy(acts[-1], A, b, l < len(layers) - 1))
    h = acts[-1][:, 0]
    if clip:
        hc = np.clip(h, -1.0, 1.0)
        dh = (np.abs(h) < 1.0).astype(np.float64)
    else:
        hc = h
        dh = np.ones_like(h)
    Fb = F[idx]
    pred = u * hc + Fb @ v
    r = pred - y[idx]
    coef = 2.0 * r / m
    gv[:] = coef @ Fb
    gu = float(coef @ hc)
    delta = (coef * u * dh)[:, None]
    for l in range(len(layers) - 1, -1, -1):
        gA, gb = gview[l]
        gA[:] = delta.T @ acts[l]
        gb[:] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ layers[l][0]) * (acts[l] > 0.0)
    return float(r @ r), gu


def _epoch_numpy(theta, vel, sizes, offsets, X, F, y, v, vel_v, u, vel_u,
                 perm, batch_size, lr, mom, bound, clip, train_v, train_u):
    n = perm.shape[0]
    grad = np.zeros_like(theta)
    gv = np.zeros_like(v)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        loss, gu = _batch_grad_numpy(theta, sizes, offsets, X, F, y, idx, v,
                                     u[0], clip, grad, gv)
        total += loss
        vel *= mom
        vel -= lr * grad
        theta += vel
        if train_v:
            vel_v *= mom
            vel_v -= lr * gv
            v += vel_v
        if train_u:
            vel_u[0] = mom * vel_u[0] - lr * gu
            u[0] += vel_u[0]
        np.clip(theta, -bound, bound, out=theta)
        nv = np.sqrt(v @ v)
        if nv > 1.0:
            v /= nv
        u[0] = min(1.0, max(-1.0, u[0]))
    return total / n


# ----------------------------------------------------------------------------
# compiled variants and backend selection
# ----------------------------------------------------------------------------

_affine_rows_kernel = njit(_affine_rows)
forward_numba = njit(_forward_jit)
_batch_grad_kernel = njit(_batch_grad_jit)
batch_grad_numba = _batch_grad_kernel
_project_kernel = njit(_project)
epoch_numba = njit(_epoch_jit)

forward_numpy = _forward_numpy
batch_grad_numpy = _batch_grad_numpy
epoch_numpy = _epoch_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    forward_kernel = forward_numba
    batch_grad_kernel = batch_grad_numba
    epoch_kernel = epoch_numba
else:
    forward_kernel = forward_numpy
    batch_grad_kernel = batch_grad_numpy
    epoch_kernel = epoch_numpy

__all__ = [
    "BACKEND", "HAVE_NUMBA", "layer_offsets",
    "forward_kernel", "batch_grad_kernel", "epoch_kernel",
    "forward_numba", "batch_grad_numba", "epoch_numba",
    "forward_numpy", "batch_grad_numpy", "epoch_numpy",
]
