"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools

import numpy as np


def patch_at(x, geom, n, oh, ow):
    """Zero-padded receptive field at output (oh, ow) as a flat vector."""
    vec = []
    for c in range(geom.in_channels):
        for ky in range(geom.kernel_h):
            for kx in range(geom.kernel_w):
                iy = oh * geom.stride + ky - geom.pad
                ix = ow * geom.stride + kx - geom.pad
                inside = 0 <= iy < x.shape[2] and 0 <= ix < x.shape[3]
                vec.append(x[n, c, iy, ix] if inside else 0.0)
    return np.array(vec)


def patch_positions(x_shape, geom, oh, ow):
    """(c, iy, ix) of each patch element, None where the element is padding."""
    out = []
    for c in range(geom.in_channels):
        for ky in range(geom.kernel_h):
            for kx in range(geom.kernel_w):
                iy = oh * geom.stride + ky - geom.pad
                ix = ow * geom.stride + kx - geom.pad
                inside = 0 <= iy < x_shape[2] and 0 <= ix < x_shape[3]
                out.append((c, iy, ix) if inside else None)
    return out


def upper_matrix(w2_row, n):
    """Packed upper triangle -> dense upper-triangular matrix, by explicit loops."""
    m = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            m[i, j] = w2_row[k]
            k += 1
    return m


def volterra_forward(x, w1, w2, b, geom):
    N, _, H, W = x.shape
    ho, wo = geom.output_hw(H, W)
    n = geom.n
    y = np.zeros((N, geom.out_channels, ho, wo))
    for s in range(N):
        for o in range(geom.out_channels):
            U = upper_matrix(w2[o], n)
            for p in range(ho):
                for q in range(wo):
                    v = patch_at(x, geom, s, p, q)
                    total = b[o]
                    for i in range(n):
                        total += w1[o, i] * v[i]
                        for j in range(i, n):
                            total += U[i, j] * v[i] * v[j]
                    y[s, o, p, q] = total
    return y


def volterra_backward(x, g, w1, w2, geom):
    """Gradients (dw1, dw2 packed, db, dx) of sum(g * y) by direct summation."""
    N, _, H, W = x.shape
    ho, wo = geom.output_hw(H, W)
    n = geom.n
    dw1 = np.zeros_like(w1)
    dw2 = np.zeros_like(w2)
    db = np.zeros(geom.out_channels)
    dx = np.zeros_like(x)
    for s in range(N):
        for p in range(ho):
            for q in range(wo):
                v = patch_at(x, geom, s, p, q)
                where = patch_positions(x.shape, geom, p, q)
                for o in range(geom.out_channels):
                    gv = g[s, o, p, q]
                    db[o] += gv
                    U = upper_matrix(w2[o], n)
                    k = 0
                    for i in range(n):
                        dw1[o, i] += gv * v[i]
                        for j in range(i, n):
                            dw2[o, k] += gv * v[i] * v[j]
                            k += 1
                    for i in range(n):
                        if where[i] is None:
                            continue
                        d = w1[o, i] + sum((U[i, j] + U[j, i]) * v[j] for j in range(n))
                        c, iy, ix = where[i]
                        dx[s, c, iy, ix] += gv * d
    return dw1, dw2, db, dx


def monomial_count(n, r):
    """Number of monomials of total degree <= r in n variables, by enumeration."""
    count = 0
    for degree in range(r + 1):
        count += sum(1 for _ in itertools.combinations_with_replacement(range(n), degree))
    return count


def ascent_on_sphere(A, b, rho, restarts=200, max_steps=20000, seed=0):
    """Best value of x^T A x + b^T x on |x| = rho over projected-gradient restarts.

    All restarts advance together; iteration stops once no iterate moves.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((restarts, b.size))
    X *= rho / np.linalg.norm(X, axis=1, keepdims=True)
    lip = 2 * np.abs(np.linalg.eigvalsh(A)).max() + np.linalg.norm(b) / rho + 1e-12
    for _ in range(max_steps):
        nxt = X + (2 * X @ A + b) / lip
        norms = np.linalg.norm(nxt, axis=1, keepdims=True)
        # a step that lands on the origin keeps its previous iterate
        nxt = np.where(norms > 0, nxt * (rho / np.where(norms > 0, norms, 1.0)), X)
        moved = np.abs(nxt - X).max()
        X = nxt
        if moved < 1e-15 * rho:
            break
    values = np.einsum("ki,ij,kj->k", X, A, X) + X @ b
    return float(values.max())


def sphere_instance(rng, n):
    """Random (A, b, rho) for the sphere problem, with hard and degenerate cases mixed in."""
    kind = rng.integers(0, 4)
    M = rng.standard_normal((n, n))
    A = 0.5 * (M + M.T)
    b = rng.standard_normal(n)
    rho = float(np.exp(rng.uniform(-2, 2)))
    if kind == 1 and n > 1:
        # hard case: b orthogonal to the leading eigenvector, small enough
        mu, Q = np.linalg.eigh(A)
        b -= Q[:, -1] * (Q[:, -1] @ b)
        b *= 1e-3
    elif kind == 2 and n > 2:
        # repeated top eigenvalue
        mu, Q = np.linalg.eigh(A)
        mu[-2] = mu[-1]
        A = (Q * mu) @ Q.T
        A = 0.5 * (A + A.T)
    elif kind == 3:
        b *= 1e3
    return A, b, rho
