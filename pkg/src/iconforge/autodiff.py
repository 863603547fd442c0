"""Minimal reverse-mode differentiation over the registration op set.

A :class:`Tape` records one forward pass as a linear sequence of nodes (the
insertion order is the topological order) and plays hand-derived adjoints
back in reverse. The op set is closed: exactly the operations the predictor
network and the objective need, nothing generic.

Conventions:

* network activations are channels-first ``(C, X, Y, Z)`` float arrays;
* scalar images are ``(X, Y, Z)``; transformation value fields are
  channel-last ``(X, Y, Z, 3)`` normalized coordinates;
* loss outputs are 0-d float64 arrays;
* ops preserve the floating dtype of their inputs (float32 in production,
  float64 when a test wants tight finite-difference checks).

One tape serves one forward/backward cycle; a second ``backward`` raises
``tape-consumed``. Parameter gradients accumulate into the
:class:`ParamStore` that owns the leaves.
"""

from __future__ import annotations

import copy
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteGradient, ShapeMismatch, TapeConsumed
from .loss import (
    LossConfig,
    jacobian_penalty_backward,
    jacobian_penalty_forward,
    lncc_backward,
    lncc_forward,
)
from .transform import identity_values
from .volume import axis_interp_matrix, flat_index, index_coords, sample_grid


class Var:
    """Handle to one tape value."""

    __slots__ = ("value", "idx", "requires")

    def __init__(self, value: np.ndarray, idx: int, requires: bool):
        self.value = value
        self.idx = idx
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape


class _Node:
    __slots__ = ("parents", "bwd", "requires")

    def __init__(self, parents: tuple[int, ...], bwd: Callable, requires: bool):
        self.parents = parents
        self.bwd = bwd
        self.requires = requires


class ParamStore:
    """Named parameter arrays with gradient buffers and Adam moments."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> None:
        if name in self._arrays:
            raise ValueError(f"parameter {name!r} already registered")
        array = np.asarray(array)
        arr = np.array(array, dtype=np.float64 if array.dtype == np.float64 else np.float32)
        self._arrays[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.trainable[name] = trainable
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._arrays)

    def get(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def set(self, name: str, array: np.ndarray) -> None:
        cur = self._arrays[name]
        if array.shape != cur.shape:
            raise ShapeMismatch(f"parameter {name!r}: shape {array.shape} != {cur.shape}")
        self._arrays[name] = array.astype(cur.dtype)

    def set_trainable(self, prefix: str, flag: bool) -> None:
        """Toggle trainability for every parameter whose name starts with prefix."""
        for name in self._arrays:
            if name.startswith(prefix):
                self.trainable[name] = flag

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def clone(self) -> "ParamStore":
        return copy.deepcopy(self)

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """One Adam update over the trainable parameters.

        Aborts without touching any state if a trainable gradient is
        non-finite; zeroes all gradient buffers afterwards.
        """
        names = [n for n in self._arrays if self.trainable[n]]
        for n in names:
            if not np.isfinite(self.grads[n]).all():
                raise NonFiniteGradient(f"non-finite gradient in {n!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for n in names:
            g = self.grads[n]
            m = self._m[n]
            v = self._v[n]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            self._arrays[n] = (self._arrays[n] - lr * update).astype(self._arrays[n].dtype)
        self.zero_grads()


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    params.adam_step(lr, beta1=beta1, beta2=beta2, eps=eps)


# ---------------------------------------------------------------------------
# shared interpolation adjoints (warp / compose)
# ---------------------------------------------------------------------------

# Per-slab budget for convolution column matrices, in floats (~32 MB fp32).
_CONV_SLAB_FLOATS = 8_000_000


def _conv_slab_len(c_in: int, x_dim: int, y_dim: int) -> int:
    per_z = max(1, c_in * 27 * x_dim * y_dim)
    return max(1, _CONV_SLAB_FLOATS // per_z)


def _im2col_slab(pad: np.ndarray, z0: int, z1: int) -> np.ndarray:
    """Column matrix (Cin*27, X*Y*(z1-z0)) for output slices [z0, z1)."""
    c_in = pad.shape[0]
    win = sliding_window_view(pad[:, :, :, z0:z1 + 2], (3, 3, 3), axis=(1, 2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3))
    return cols.reshape(c_in * 27, -1)


def _conv3d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """GEMM-based same-shape conv, slabbed along z to bound memory."""
    c_out, c_in = w.shape[0], w.shape[1]
    spatial = x.shape[1:]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    wm = w.reshape(c_out, -1)
    y = np.empty((c_out,) + spatial, dtype=x.dtype)
    slab = _conv_slab_len(c_in, spatial[0], spatial[1])
    for z0 in range(0, spatial[2], slab):
        z1 = min(z0 + slab, spatial[2])
        cols = _im2col_slab(pad, z0, z1)
        y[:, :, :, z0:z1] = (wm @ cols).reshape(c_out, spatial[0], spatial[1], z1 - z0)
    return y


def _conv3d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                     need_w: bool, need_x: bool):
    """Adjoints of ``_conv3d_forward`` w.r.t. kernel and input."""
    if not (need_w or need_x):
        return None, None
    c_out, c_in = w.shape[0], w.shape[1]
    spatial = x.shape[1:]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1))) if need_w else None
    wm = w.reshape(c_out, -1)
    g_w = np.zeros((c_out, c_in * 27), dtype=g.dtype) if need_w else None
    gpad = (np.zeros((c_in, spatial[0] + 2, spatial[1] + 2, spatial[2] + 2), dtype=g.dtype)
            if need_x else None)
    slab = _conv_slab_len(c_in, spatial[0], spatial[1])
    for z0 in range(0, spatial[2], slab):
        z1 = min(z0 + slab, spatial[2])
        nz = z1 - z0
        gm = g[:, :, :, z0:z1].reshape(c_out, -1)
        if need_w:
            g_w += gm @ _im2col_slab(pad, z0, z1).T
        if need_x:
            gcols = (wm.T @ gm).reshape(c_in, 3, 3, 3, spatial[0], spatial[1], nz)
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        gpad[:, i:i + spatial[0], j:j + spatial[1], k + z0:k + z0 + nz] += \
                            gcols[:, i, j, k]
    g_x = gpad[:, 1:-1, 1:-1, 1:-1] if need_x else None
    return (g_w.reshape(w.shape) if need_w else None), g_x


def _interp_backward(field: np.ndarray, q: np.ndarray, g: np.ndarray,
                     need_field: bool, need_query: bool):
    """Adjoints of trilinear field evaluation at coordinates ``q``.

    Returns ``(g_field, g_query)`` (either may be None). The query adjoint
    is the analytic cell slope scaled to normalized coordinates and zeroed
    where the coordinate was clamped.
    """
    field = np.ascontiguousarray(field)
    dims = field.shape[:3]
    n_nodes = dims[0] * dims[1] * dims[2]
    channels = field.ndim == 4
    n_ch = field.shape[3] if channels else 1
    flat = field.reshape(n_nodes, -1)
    i0, w, ingrid = index_coords(q, dims)
    base = flat_index(i0, dims)
    fx = (1.0 - w[..., 0], w[..., 0])
    fy = (1.0 - w[..., 1], w[..., 1])
    fz = (1.0 - w[..., 2], w[..., 2])
    gf = np.zeros((n_nodes, n_ch), dtype=np.float64) if need_field else None
    gq = [0.0, 0.0, 0.0] if need_query else None
    g2 = g.reshape(-1, n_ch) if channels else g.reshape(-1)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wt = fx[dx] * fy[dy] * fz[dz]
                idx = (base + ((dx * dims[1] + dy) * dims[2] + dz)).reshape(-1)
                if need_field:
                    wtf = wt.reshape(-1)
                    if channels:
                        for c in range(n_ch):
                            gf[:, c] += np.bincount(idx, weights=wtf * g2[:, c],
                                                    minlength=n_nodes)
                    else:
                        gf[:, 0] += np.bincount(idx, weights=wtf * g2, minlength=n_nodes)
                if need_query:
                    vals = np.take(flat, idx, axis=0).reshape(
                        wt.shape + (n_ch,) if channels else wt.shape)
                    gv = (g * vals).sum(axis=-1) if channels else g * vals
                    gq[0] = gq[0] + (1.0 if dx else -1.0) * fy[dy] * fz[dz] * gv
                    gq[1] = gq[1] + (1.0 if dy else -1.0) * fx[dx] * fz[dz] * gv
                    gq[2] = gq[2] + (1.0 if dz else -1.0) * fx[dx] * fy[dy] * gv
    g_field = None
    if need_field:
        g_field = gf.reshape(field.shape) if channels else gf.reshape(dims)
    g_query = None
    if need_query:
        g_query = np.stack(
            [gq[c] * (dims[c] - 1.0) * ingrid[..., c] for c in range(3)], axis=-1
        )
    return g_field, g_query


def _pool_geometry(shape: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    out = tuple(max(1, n // 2) for n in shape)
    factors = tuple(2 if n >= 2 else 1 for n in shape)
    return out, factors


def _resize_mats(old: Sequence[int], new: Sequence[int], transpose: bool) -> list[np.ndarray | None]:
    mats = []
    for n_in, n_out in zip(old, new):
        if n_in == n_out:
            mats.append(None)
        else:
            m = axis_interp_matrix(n_in, n_out)
            mats.append(m.T if transpose else m)
    return mats


def _apply_axis_mats(arr: np.ndarray, mats: Sequence[np.ndarray | None], axes: Sequence[int]) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    for m, ax in zip(mats, axes):
        if m is None:
            continue
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, ax, 0), axes=([1], [0])), 0, ax)
    return out


class Tape:
    """Records one forward pass; replays adjoints in reverse order."""

    def __init__(self):
        self._nodes: list[_Node | None] = []
        self._requires: list[bool] = []
        self._param_leaves: dict[int, tuple[ParamStore, str]] = {}
        self._leaf_grads: dict[int, np.ndarray] = {}
        self.consumed = False

    # -- leaves ------------------------------------------------------------

    def _new_var(self, value: np.ndarray, node: _Node | None, requires: bool) -> Var:
        self._nodes.append(node)
        self._requires.append(requires)
        return Var(value, len(self._nodes) - 1, requires)

    def input(self, array: np.ndarray, requires_grad: bool = False) -> Var:
        return self._new_var(np.asarray(array), None, requires_grad)

    def param(self, store: ParamStore, name: str) -> Var:
        var = self._new_var(store.get(name), None, store.trainable[name])
        self._param_leaves[var.idx] = (store, name)
        return var

    def _emit(self, value: np.ndarray, parents: Sequence[Var], bwd: Callable) -> Var:
        requires = any(p.requires for p in parents)
        node = _Node(tuple(p.idx for p in parents), bwd, requires) if requires else None
        return self._new_var(value, node, requires)

    # -- elementwise and reductions -----------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"add: {a.value.shape} vs {b.value.shape}")
        return self._emit(a.value + b.value, (a, b), lambda g, needs: (g, g))

    def sub(self, a: Var, b: Var) -> Var:
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"sub: {a.value.shape} vs {b.value.shape}")
        return self._emit(a.value - b.value, (a, b), lambda g, needs: (g, -g))

    def mul(self, a: Var, b: Var) -> Var:
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"mul: {a.value.shape} vs {b.value.shape}")
        av, bv = a.value, b.value
        return self._emit(av * bv, (a, b), lambda g, needs: (g * bv if needs[0] else None,
                                                             g * av if needs[1] else None))

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)
        return self._emit(a.value * c, (a,), lambda g, needs: (g * c,))

    def add_const(self, a: Var, arr: np.ndarray) -> Var:
        return self._emit(a.value + arr, (a,), lambda g, needs: (g,))

    def sum_all(self, a: Var) -> Var:
        shape = a.value.shape
        dtype = a.value.dtype
        value = np.asarray(np.sum(a.value, dtype=np.float64))
        return self._emit(value, (a,),
                          lambda g, needs: (np.full(shape, float(g), dtype=dtype),))

    # -- network ops ---------------------------------------------------------

    def conv3d(self, x: Var, w: Var, b: Var) -> Var:
        """3x3x3 convolution, stride 1, zero-padded to the same shape.

        ``x`` is (Cin, X, Y, Z), ``w`` is (Cout, Cin, 3, 3, 3), ``b`` (Cout,).
        """
        xv, wv, bv = x.value, w.value, b.value
        if xv.ndim != 4 or wv.ndim != 5 or wv.shape[1] != xv.shape[0] or wv.shape[2:] != (3, 3, 3):
            raise ShapeMismatch(f"conv3d: x {xv.shape}, w {wv.shape}")
        if bv.shape != (wv.shape[0],):
            raise ShapeMismatch(f"conv3d: bias {bv.shape} != ({wv.shape[0]},)")
        y = _conv3d_forward(xv, wv)
        y += bv[:, None, None, None]

        def bwd(g, needs):
            g_b = g.reshape(g.shape[0], -1).sum(axis=1) if needs[2] else None
            g_w, g_x = _conv3d_backward(xv, wv, g, needs[1], needs[0])
            return g_x, g_w, g_b

        return self._emit(y, (x, w, b), bwd)

    def leaky_relu(self, x: Var, alpha: float = 0.2) -> Var:
        xv = x.value
        y = np.where(xv >= 0, xv, alpha * xv)
        return self._emit(y, (x,),
                          lambda g, needs: (np.where(xv >= 0, g, alpha * g),))

    def stack_channels(self, a: Var, b: Var) -> Var:
        """Two scalar images (X,Y,Z) -> one (2,X,Y,Z) activation."""
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"stack: {a.value.shape} vs {b.value.shape}")
        y = np.stack([a.value, b.value], axis=0)
        return self._emit(y, (a, b), lambda g, needs: (g[0], g[1]))

    def avg_pool2x(self, x: Var) -> Var:
        """2x average pooling on (X,Y,Z) or (C,X,Y,Z); axes of length 1 pass
        through and odd trailing voxels are dropped (floor semantics)."""
        xv = x.value
        if xv.ndim not in (3, 4):
            raise ShapeMismatch(f"avg_pool2x expects 3D or 4D, got {xv.shape}")
        lead = xv.shape[:-3]
        spatial = xv.shape[-3:]
        out_dims, factors = _pool_geometry(spatial)
        crop = tuple(o * f for o, f in zip(out_dims, factors))
        v = xv[..., :crop[0], :crop[1], :crop[2]]
        v6 = v.reshape(lead + (out_dims[0], factors[0], out_dims[1], factors[1], out_dims[2], factors[2]))
        k = len(lead)
        y = v6.mean(axis=(k + 1, k + 3, k + 5), dtype=np.float64).astype(xv.dtype)
        scale = 1.0 / (factors[0] * factors[1] * factors[2])

        def bwd(g, needs):
            gx = np.zeros_like(xv)
            expand = (g * scale).reshape(lead + (out_dims[0], 1, out_dims[1], 1, out_dims[2], 1))
            gx[..., :crop[0], :crop[1], :crop[2]] = np.broadcast_to(expand, v6.shape).reshape(
                lead + crop)
            return (gx,)

        return self._emit(y, (x,), bwd)

    def resize3(self, x: Var, new_dims: Sequence[int], channels_first: bool = True) -> Var:
        """Trilinear resize of the three spatial axes onto a new node grid."""
        xv = x.value
        axes = (1, 2, 3) if channels_first else (0, 1, 2)
        old = tuple(xv.shape[a] for a in axes)
        new = tuple(int(d) for d in new_dims)
        mats = _resize_mats(old, new, transpose=False)
        y = _apply_axis_mats(xv, mats, axes).astype(xv.dtype)
        tmats = _resize_mats(old, new, transpose=True)

        def bwd(g, needs):
            return (_apply_axis_mats(g, tmats, axes).astype(xv.dtype),)

        return self._emit(y, (x,), bwd)

    def concat_channels(self, parts: Sequence[Var]) -> Var:
        vals = [p.value for p in parts]
        sizes = [v.shape[0] for v in vals]
        y = np.concatenate(vals, axis=0)
        offsets = np.cumsum([0] + sizes)

        def bwd(g, needs):
            return tuple(
                g[offsets[i]:offsets[i + 1]] if needs[i] else None for i in range(len(sizes))
            )

        return self._emit(y, tuple(parts), bwd)

    def to_channel_last(self, x: Var) -> Var:
        """(3, X, Y, Z) displacement stack -> (X, Y, Z, 3) field layout."""
        y = np.ascontiguousarray(np.moveaxis(x.value, 0, 3))
        return self._emit(y, (x,),
                          lambda g, needs: (np.moveaxis(g, 3, 0),))

    # -- registration ops ------------------------------------------------------

    def warp_image(self, img: Var, phi_values: Var) -> Var:
        """Pull-back warp of a scalar image by a map value field."""
        iv, mv = img.value, phi_values.value
        if iv.ndim != 3 or mv.ndim != 4 or mv.shape[3] != 3:
            raise ShapeMismatch(f"warp: image {iv.shape}, map {mv.shape}")
        y = sample_grid(iv, mv).astype(iv.dtype)

        def bwd(g, needs):
            g_img, g_map = _interp_backward(iv, mv, g, needs[0], needs[1])
            return (None if g_img is None else g_img.astype(iv.dtype),
                    None if g_map is None else g_map.astype(mv.dtype))

        return self._emit(y, (img, phi_values), bwd)

    def compose_maps(self, outer: Var, inner: Var) -> Var:
        """(outer o inner) on the inner grid; both are (X,Y,Z,3) value fields."""
        ov, iv = outer.value, inner.value
        if ov.ndim != 4 or iv.ndim != 4 or ov.shape[3] != 3 or iv.shape[3] != 3:
            raise ShapeMismatch(f"compose: {ov.shape} o {iv.shape}")
        disp = ov - identity_values(ov.shape[:3])
        q = iv.astype(np.float64)
        out = np.clip(q, 0.0, 1.0) + sample_grid(disp, q)
        i0, w, _ = index_coords(q, ov.shape[:3])
        node = ((w == 0.0) | (w == 1.0)).all(axis=-1)
        if np.any(node):
            ii = i0 + (w == 1.0)
            out = np.where(node[..., None], ov[ii[..., 0], ii[..., 1], ii[..., 2]], out)
        y = out.astype(ov.dtype)

        def bwd(g, needs):
            g_outer, g_inner = _interp_backward(ov, iv, g, needs[0], needs[1])
            return (None if g_outer is None else g_outer.astype(ov.dtype),
                    None if g_inner is None else g_inner.astype(iv.dtype))

        return self._emit(y, (outer, inner), bwd)

    def lncc_loss(self, a: Var, b: Var, cfg: LossConfig) -> Var:
        value, saved = lncc_forward(a.value, b.value, cfg.lncc_radius, cfg.variance_epsilon)

        def bwd(g, needs):
            ga, gb = lncc_backward(saved, float(g))
            return (ga.astype(a.value.dtype) if needs[0] else None,
                    gb.astype(b.value.dtype) if needs[1] else None)

        return self._emit(np.asarray(value, dtype=np.float64), (a, b), bwd)

    def jacobian_penalty(self, phi_values: Var) -> Var:
        value, saved = jacobian_penalty_forward(phi_values.value)

        def bwd(g, needs):
            return (jacobian_penalty_backward(saved, float(g)).astype(phi_values.value.dtype),)

        return self._emit(np.asarray(value, dtype=np.float64), (phi_values,), bwd)

    # -- reverse pass ------------------------------------------------------------

    def backward(self, out: Var, seed: float = 1.0) -> None:
        """Accumulate adjoints of ``seed * out`` into leaves and param stores."""
        if self.consumed:
            raise TapeConsumed("tape already consumed by a previous backward pass")
        self.consumed = True
        grads: dict[int, np.ndarray] = {}
        if out.value.ndim == 0:
            grads[out.idx] = np.asarray(float(seed), dtype=np.float64)
        else:
            grads[out.idx] = np.full(out.value.shape, float(seed), dtype=out.value.dtype)
        for idx in range(len(self._nodes) - 1, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self._nodes[idx]
            if node is None:  # leaf
                if idx in self._param_leaves:
                    store, name = self._param_leaves[idx]
                    store.grads[name] += g.astype(store.grads[name].dtype)
                else:
                    self._leaf_grads[idx] = g
                continue
            needs = tuple(self._requires[p] for p in node.parents)
            parent_grads = node.bwd(g, needs)
            for p_idx, pg in zip(node.parents, parent_grads):
                if pg is None or not self._requires[p_idx]:
                    continue
                if p_idx in grads:
                    grads[p_idx] = grads[p_idx] + pg
                else:
                    grads[p_idx] = pg

    def grad(self, var: Var) -> np.ndarray | None:
        """Gradient accumulated at a free leaf during backward."""
        g = self._leaf_grads.get(var.idx)
        if g is None:
            return None
        return g.astype(var.value.dtype) if hasattr(g, "astype") else g
