"""Differentiable bilinear image warping.

Coordinates are normalized so that (-1, -1) and (1, 1) land exactly on the
corner pixel centers (corner-aligned). Sample locations outside the image
clamp to the border pixel, where the spatial derivative is zero.
"""

import numpy as np

from . import engine
from .errors import DegenerateSizeError, ShapeMismatchError


def identity_grid(height, width, dtype=np.float64):
    """Normalized sampling grid with coords[r, c] = (x, y) in [-1, 1].

    float64 by default so that mapping back to pixel space recovers the
    integer lattice to machine precision."""
    if height < 2 or width < 2:
        raise DegenerateSizeError(
            f"bilinear sampling needs at least 2x2 images, got {height}x{width}"
        )
    xs = np.linspace(-1.0, 1.0, width, dtype=dtype)
    ys = np.linspace(-1.0, 1.0, height, dtype=dtype)
    grid = np.empty((height, width, 2), dtype=dtype)
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


def _check_shapes(moving, grid, field):
    h, w = moving.shape[-2:]
    if grid.shape != (h, w, 2):
        raise ShapeMismatchError(f"grid shape {grid.shape} does not match image {h}x{w}")
    if field.shape[-3:] != (h, w, 2):
        raise ShapeMismatchError(f"field shape {field.shape} does not match image {h}x{w}")
    if field.ndim == 4 and moving.ndim == 3 and field.shape[0] != moving.shape[0]:
        raise ShapeMismatchError(
            f"batch sizes differ: field {field.shape[0]}, moving {moving.shape[0]}"
        )


def _stencil(moving, grid, field):
    """Clamped corner indices, interpolation weights, and gathered corners.

    Pixel coordinates are computed in float64 so a zero field recovers the
    integer lattice exactly (identity warp is pixel-exact)."""
    h, w = moving.shape[-2:]
    u = grid.astype(np.float64) + field
    x = (u[..., 0] + 1.0) * 0.5 * (w - 1)
    y = (u[..., 1] + 1.0) * 0.5 * (h - 1)
    in_x = (x >= 0) & (x <= w - 1)
    in_y = (y >= 0) & (y <= h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    tx = (x - x0).astype(moving.dtype)
    ty = (y - y0).astype(moving.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    out_shape = np.broadcast_shapes(moving.shape[:-2] + (h, w), x0.shape)
    x0, x1, y0, y1 = (np.broadcast_to(a, out_shape) for a in (x0, x1, y0, y1))
    tx, ty = np.broadcast_to(tx, out_shape), np.broadcast_to(ty, out_shape)
    if moving.ndim == 3:
        b = np.broadcast_to(np.arange(moving.shape[0]).reshape(-1, 1, 1), out_shape)
        gather = lambda yy, xx: moving[b, yy, xx]
    else:
        b = None
        gather = lambda yy, xx: moving[yy, xx]
    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    return b, x0, x1, y0, y1, tx, ty, in_x, in_y, v00, v01, v10, v11


def bilinear_sample(moving, grid, field):
    """Warp ``moving`` by sampling at grid + field (plain arrays in and out)."""
    moving = np.asarray(moving)
    grid = np.asarray(grid)
    field = np.asarray(field)
    _check_shapes(moving, grid, field)
    _, _, _, _, _, tx, ty, _, _, v00, v01, v10, v11 = _stencil(moving, grid, field)
    top = v00 + tx * (v01 - v00)
    bottom = v10 + tx * (v11 - v10)
    return top + ty * (bottom - top)


def bilinear_sample_gradients(moving, grid, field, upstream, need_moving=True):
    """Analytic partials of the warped image: returns (d/dfield, d/dmoving).

    ``need_moving=False`` skips the scatter-add for the moving-image
    gradient (returns None there) when only the field gradient is used."""
    moving = np.asarray(moving)
    grid = np.asarray(grid)
    field = np.asarray(field)
    upstream = np.asarray(upstream)
    _check_shapes(moving, grid, field)
    if upstream.shape != np.broadcast_shapes(moving.shape, field.shape[:-1]):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match warped output"
        )
    h, w = moving.shape[-2:]
    b, x0, x1, y0, y1, tx, ty, in_x, in_y, v00, v01, v10, v11 = _stencil(
        moving, grid, field
    )

    dval_dx = (1 - ty) * (v01 - v00) + ty * (v11 - v10)
    dval_dy = (1 - tx) * (v10 - v00) + tx * (v11 - v01)
    gf_x = upstream * dval_dx * in_x * (0.5 * (w - 1))
    gf_y = upstream * dval_dy * in_y * (0.5 * (h - 1))
    grad_field = np.zeros(field.shape, dtype=field.dtype)
    grad_field[..., 0] = _reduce_to(gf_x, field.shape[:-1])
    grad_field[..., 1] = _reduce_to(gf_y, field.shape[:-1])

    if not need_moving:
        return grad_field, None
    grad_moving = np.zeros(moving.shape, dtype=moving.dtype)
    w00 = upstream * (1 - ty) * (1 - tx)
    w01 = upstream * (1 - ty) * tx
    w10 = upstream * ty * (1 - tx)
    w11 = upstream * ty * tx
    idx = (lambda yy, xx: (b, yy, xx)) if b is not None else (lambda yy, xx: (yy, xx))
    np.add.at(grad_moving, idx(y0, x0), w00)
    np.add.at(grad_moving, idx(y0, x1), w01)
    np.add.at(grad_moving, idx(y1, x0), w10)
    np.add.at(grad_moving, idx(y1, x1), w11)
    return grad_field, grad_moving


def _reduce_to(grad, shape):
    """Sum away broadcast batch axes so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    return grad.sum(axis=tuple(range(grad.ndim - len(shape))))


def warp(moving, grid, field):
    """Autodiff wrapper: warped image as a graph node differentiable in field
    (and in the moving image when it is a gradient-carrying tensor)."""
    moving_t = moving if isinstance(moving, engine.Tensor) else engine.Tensor(moving)
    field_t = field if isinstance(field, engine.Tensor) else engine.Tensor(field)
    grid = np.asarray(grid)
    out = bilinear_sample(moving_t.data, grid, field_t.data)

    def backward(g):
        need_moving = moving_t.requires_grad or bool(moving_t._parents)
        grad_field, grad_moving = bilinear_sample_gradients(
            moving_t.data, grid, field_t.data, g, need_moving=need_moving
        )
        engine._accumulate(field_t, grad_field)
        if grad_moving is not None:
            engine._accumulate(moving_t, grad_moving)

    return engine.custom_op(out, (moving_t, field_t), backward)
