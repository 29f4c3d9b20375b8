"""Numba kernels for the MLS-MPM substep, knife contact and bone queries.

Everything here works on plain float64 arrays so the Python layer can stay
thin. Loops are serial on purpose: scatter order is fixed, which keeps the
results bit-reproducible between runs.
"""

import math

import numpy as np
from numba import njit

MEAT = 0
BONE = 1

_PAIRS = np.array([[0, 1], [0, 2], [1, 2]], dtype=np.int64)


@njit(cache=True, error_model="numpy")
def svd3(F, U, sig, V):
    """One-sided Jacobi SVD of a 3x3 matrix, ``F = U diag(sig) V^T``.

    ``V`` is a product of plane rotations so ``det(V) = +1``; ``det(U)`` then
    carries the sign of ``det(F)``. Singular values are not sorted.
    """
    for i in range(3):
        for j in range(3):
            V[i, j] = 1.0 if i == j else 0.0
    svd3_warm(F, U, sig, V)


@njit(cache=True, error_model="numpy")
def svd3_warm(F, U, sig, V):
    """Same as :func:`svd3` but starts from the rotation already in ``V``.

    With the previous substep's ``V`` the columns of ``F V`` are nearly
    orthogonal and one sweep usually suffices.
    """
    for i in range(3):
        for j in range(3):
            U[i, j] = F[i, 0] * V[0, j] + F[i, 1] * V[1, j] + F[i, 2] * V[2, j]
    for _sweep in range(10):
        worst = 0.0
        for k in range(3):
            p = _PAIRS[k, 0]
            q = _PAIRS[k, 1]
            alpha = U[0, p] * U[0, p] + U[1, p] * U[1, p] + U[2, p] * U[2, p]
            beta = U[0, q] * U[0, q] + U[1, q] * U[1, q] + U[2, q] * U[2, q]
            gamma = U[0, p] * U[0, q] + U[1, p] * U[1, q] + U[2, p] * U[2, q]
            if gamma == 0.0:
                continue
            rel = abs(gamma) / math.sqrt(alpha * beta)
            if rel <= 1e-15:
                continue
            if rel > worst:
                worst = rel
            zeta = (beta - alpha) / (2.0 * gamma)
            if zeta >= 0.0:
                t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
            else:
                t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            for r in range(3):
                a = U[r, p]
                b = U[r, q]
                U[r, p] = c * a - s * b
                U[r, q] = s * a + c * b
                a = V[r, p]
                b = V[r, q]
                V[r, p] = c * a - s * b
                V[r, q] = s * a + c * b
        # convergence is quadratic: a sweep that started below 1e-8 ends at round-off
        if worst < 1e-8:
            break
    for i in range(3):
        n = math.sqrt(U[0, i] * U[0, i] + U[1, i] * U[1, i] + U[2, i] * U[2, i])
        sig[i] = n
        if n > 1e-300:
            for r in range(3):
                U[r, i] /= n
    # rank-deficient columns: complete U to an orthonormal frame
    for i in range(3):
        if sig[i] <= 1e-300:
            a = (i + 1) % 3
            b = (i + 2) % 3
            U[0, i] = U[1, a] * U[2, b] - U[2, a] * U[1, b]
            U[1, i] = U[2, a] * U[0, b] - U[0, a] * U[2, b]
            U[2, i] = U[0, a] * U[1, b] - U[1, a] * U[0, b]


@njit(cache=True, error_model="numpy")
def det3(A):
    return (
        A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
        - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
        + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0])
    )


@njit(cache=True, error_model="numpy")
def kirchhoff_fixed_corotated(F, R, lam, mu, out):
    """Kirchhoff stress ``P F^T`` of the fixed-corotated model given the polar rotation ``R``."""
    J = det3(F)
    vol = lam * J * (J - 1.0)
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += (F[i, k] - R[i, k]) * F[j, k]
            out[i, j] = 2.0 * mu * acc
        out[i, i] += vol


@njit(cache=True, error_model="numpy")
def polar_rotation(F, U, sig, V, R):
    svd3(F, U, sig, V)
    for i in range(3):
        for j in range(3):
            R[i, j] = U[i, 0] * V[j, 0] + U[i, 1] * V[j, 1] + U[i, 2] * V[j, 2]


@njit(cache=True, error_model="numpy")
def first_piola(F, lam, mu, P):
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    R = np.empty((3, 3))
    sig = np.empty(3)
    polar_rotation(F, U, sig, V, R)
    J = det3(F)
    # F^{-T} = cofactor(F) / J
    cof = np.empty((3, 3))
    cof[0, 0] = F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1]
    cof[0, 1] = F[1, 2] * F[2, 0] - F[1, 0] * F[2, 2]
    cof[0, 2] = F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]
    cof[1, 0] = F[0, 2] * F[2, 1] - F[0, 1] * F[2, 2]
    cof[1, 1] = F[0, 0] * F[2, 2] - F[0, 2] * F[2, 0]
    cof[1, 2] = F[0, 1] * F[2, 0] - F[0, 0] * F[2, 1]
    cof[2, 0] = F[0, 1] * F[1, 2] - F[0, 2] * F[1, 1]
    cof[2, 1] = F[0, 2] * F[1, 0] - F[0, 0] * F[1, 2]
    cof[2, 2] = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    for i in range(3):
        for j in range(3):
            P[i, j] = 2.0 * mu * (F[i, j] - R[i, j]) + lam * (J - 1.0) * cof[i, j]


@njit(cache=True, error_model="numpy")
def return_map_inplace(F, lam, mu, yield_stress, U, sig, V):
    """Hencky-strain von Mises projection of ``F`` (overwritten).

    ``V`` must hold a starting rotation for the SVD (identity is fine).
    Returns True when the state was projected. ``U``/``V`` hold the SVD of the
    result either way, so callers can reuse ``U V^T`` as the polar rotation.
    """
    svd3_warm(F, U, sig, V)
    e0 = math.log(sig[0])
    e1 = math.log(sig[1])
    e2 = math.log(sig[2])
    tr = (e0 + e1 + e2) / 3.0
    d0 = e0 - tr
    d1 = e1 - tr
    d2 = e2 - tr
    dnorm = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if 2.0 * mu * dnorm <= yield_stress:
        return False
    scale = yield_stress / (2.0 * mu * dnorm)
    sig[0] = math.exp(tr + scale * d0)
    sig[1] = math.exp(tr + scale * d1)
    sig[2] = math.exp(tr + scale * d2)
    for i in range(3):
        for j in range(3):
            F[i, j] = (
                U[i, 0] * sig[0] * V[j, 0]
                + U[i, 1] * sig[1] * V[j, 1]
                + U[i, 2] * sig[2] * V[j, 2]
            )
    return True


@njit(cache=True, error_model="numpy")
def box_sdf_local(q0, q1, q2, h0, h1, h2):
    d0 = abs(q0) - h0
    d1 = abs(q1) - h1
    d2 = abs(q2) - h2
    o0 = max(d0, 0.0)
    o1 = max(d1, 0.0)
    o2 = max(d2, 0.0)
    outside = math.sqrt(o0 * o0 + o1 * o1 + o2 * o2)
    inside = min(max(d0, max(d1, d2)), 0.0)
    return outside + inside


@njit(cache=True, error_model="numpy")
def _sgn(a):
    return 1.0 if a >= 0.0 else -1.0


@njit(cache=True, error_model="numpy")
def box_sdf_normal_local(q, h, n):
    """Outward unit normal of the box SDF in the local frame, written to ``n``."""
    d0 = abs(q[0]) - h[0]
    d1 = abs(q[1]) - h[1]
    d2 = abs(q[2]) - h[2]
    o0 = max(d0, 0.0)
    o1 = max(d1, 0.0)
    o2 = max(d2, 0.0)
    outside = math.sqrt(o0 * o0 + o1 * o1 + o2 * o2)
    if outside > 0.0:
        n[0] = _sgn(q[0]) * o0 / outside
        n[1] = _sgn(q[1]) * o1 / outside
        n[2] = _sgn(q[2]) * o2 / outside
        return
    # interior or on the surface: nearest face, lowest axis wins ties
    axis = 0
    best = d0
    if d1 > best:
        axis = 1
        best = d1
    if d2 > best:
        axis = 2
    n[0] = 0.0
    n[1] = 0.0
    n[2] = 0.0
    n[axis] = _sgn(q[axis])


@njit(cache=True, error_model="numpy")
def knife_sdf(p, center, rot, half):
    """Signed distance from world point ``p`` to the oriented box."""
    r0 = p[0] - center[0]
    r1 = p[1] - center[1]
    r2 = p[2] - center[2]
    q0 = rot[0, 0] * r0 + rot[1, 0] * r1 + rot[2, 0] * r2
    q1 = rot[0, 1] * r0 + rot[1, 1] * r1 + rot[2, 1] * r2
    q2 = rot[0, 2] * r0 + rot[1, 2] * r1 + rot[2, 2] * r2
    return box_sdf_local(q0, q1, q2, half[0], half[1], half[2])


@njit(cache=True, error_model="numpy")
def knife_normal(p, center, rot, half, out):
    q = np.empty(3)
    nl = np.empty(3)
    r0 = p[0] - center[0]
    r1 = p[1] - center[1]
    r2 = p[2] - center[2]
    for a in range(3):
        q[a] = rot[0, a] * r0 + rot[1, a] * r1 + rot[2, a] * r2
    box_sdf_normal_local(q, half, nl)
    for a in range(3):
        out[a] = rot[a, 0] * nl[0] + rot[a, 1] * nl[1] + rot[a, 2] * nl[2]


@njit(cache=True, error_model="numpy")
def contact_project(v, vs, n, mu_f, out):
    """Coulomb projection of node velocity ``v`` against a surface moving at ``vs``.

    Writes the projected velocity to ``out``; returns True if it changed.
    """
    r0 = v[0] - vs[0]
    r1 = v[1] - vs[1]
    r2 = v[2] - vs[2]
    vn = r0 * n[0] + r1 * n[1] + r2 * n[2]
    if vn >= 0.0:
        out[0] = v[0]
        out[1] = v[1]
        out[2] = v[2]
        return False
    t0 = r0 - vn * n[0]
    t1 = r1 - vn * n[1]
    t2 = r2 - vn * n[2]
    tn = math.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    if tn > 0.0:
        scale = max(0.0, 1.0 - mu_f * (-vn) / tn)
    else:
        scale = 0.0
    # written relative to v so that scale == 1 (no friction loss) leaves the
    # tangential part of v bit-identical
    k = 1.0 - scale
    out[0] = v[0] - vn * n[0] - k * t0
    out[1] = v[1] - vn * n[1] - k * t1
    out[2] = v[2] - vn * n[2] - k * t2
    return True


@njit(cache=True, error_model="numpy")
def p2g_kernel(x, v, C, F, Rc, mass, vol0, mat, lam, mu, origin, inv_dx, dt,
               grid_m, grid_mv, box):
    """Scatter particles to the grid. Returns -1, or the index of a particle outside the margin.

    ``Rc`` holds each particle's polar rotation of ``F`` (see :func:`refresh_polar`).

    ``box`` receives the (lo, hi) node index range touched, for sparse clearing.
    """
    n0 = grid_m.shape[0]
    n1 = grid_m.shape[1]
    n2 = grid_m.shape[2]
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    R = np.empty((3, 3))
    sig = np.empty(3)
    tau = np.empty((3, 3))
    Fp = np.empty((3, 3))
    aff = np.empty((3, 3))
    w = np.empty((3, 3))
    fx = np.empty(3)
    base = np.empty(3, dtype=np.int64)
    dx = 1.0 / inv_dx
    stress_scale = -dt * 4.0 * inv_dx * inv_dx
    for a in range(3):
        box[0, a] = 1 << 40
        box[1, a] = -1
    for p in range(x.shape[0]):
        for a in range(3):
            loc = (x[p, a] - origin[a]) * inv_dx
            hi = (n0 if a == 0 else (n1 if a == 1 else n2)) - 1
            if not (loc >= 2.0 and loc <= hi - 2.0):
                return p
            b = int(math.floor(loc - 0.5))
            base[a] = b
            f = loc - b
            fx[a] = f
            w[a, 0] = 0.5 * (1.5 - f) ** 2
            w[a, 1] = 0.75 - (f - 1.0) ** 2
            w[a, 2] = 0.5 * (f - 0.5) ** 2
            if b < box[0, a]:
                box[0, a] = b
            if b + 2 > box[1, a]:
                box[1, a] = b + 2
        for i in range(3):
            for j in range(3):
                Fp[i, j] = F[p, i, j]
        m_id = mat[p]
        for i in range(3):
            for j in range(3):
                R[i, j] = Rc[p, i, j]
        kirchhoff_fixed_corotated(Fp, R, lam[m_id], mu[m_id], tau)
        mp = mass[p]
        s = stress_scale * vol0[p]
        for i in range(3):
            for j in range(3):
                aff[i, j] = s * tau[i, j] + mp * C[p, i, j]
        for i in range(3):
            gi = base[0] + i
            di = (i - fx[0]) * dx
            for j in range(3):
                gj = base[1] + j
                dj = (j - fx[1]) * dx
                wij = w[0, i] * w[1, j]
                for k in range(3):
                    gk = base[2] + k
                    dk = (k - fx[2]) * dx
                    wt = wij * w[2, k]
                    grid_m[gi, gj, gk] += wt * mp
                    for a in range(3):
                        grid_mv[gi, gj, gk, a] += wt * (
                            mp * v[p, a] + aff[a, 0] * di + aff[a, 1] * dj + aff[a, 2] * dk
                        )
    return -1


@njit(cache=True, error_model="numpy")
def clear_box(grid_m, grid_mv, box):
    for i in range(max(box[0, 0], 0), min(box[1, 0] + 1, grid_m.shape[0])):
        for j in range(max(box[0, 1], 0), min(box[1, 1] + 1, grid_m.shape[1])):
            for k in range(max(box[0, 2], 0), min(box[1, 2] + 1, grid_m.shape[2])):
                grid_m[i, j, k] = 0.0
                for a in range(3):
                    grid_mv[i, j, k, a] = 0.0


@njit(cache=True, error_model="numpy")
def grid_update_kernel(grid_m, grid_mv, box, origin, dx, dt, gravity, v_max,
                       knife_on, kc, krot, khalf, kv, kw, kmu, band,
                       bound, sticky_floor, impulse):
    """Normalize momenta, apply gravity, clipping, knife contact and walls in place.

    ``grid_mv`` holds velocities afterwards. The summed knife contact impulse
    (grid momentum change) is added to ``impulse``; the number of contacts is returned.
    """
    n0 = grid_m.shape[0]
    n1 = grid_m.shape[1]
    n2 = grid_m.shape[2]
    p = np.empty(3)
    vel = np.empty(3)
    vs = np.empty(3)
    nrm = np.empty(3)
    out = np.empty(3)
    contacts = 0
    for i in range(max(box[0, 0], 0), min(box[1, 0] + 1, n0)):
        for j in range(max(box[0, 1], 0), min(box[1, 1] + 1, n1)):
            for k in range(max(box[0, 2], 0), min(box[1, 2] + 1, n2)):
                m = grid_m[i, j, k]
                if m <= 0.0:
                    grid_mv[i, j, k, 0] = 0.0
                    grid_mv[i, j, k, 1] = 0.0
                    grid_mv[i, j, k, 2] = 0.0
                    continue
                for a in range(3):
                    va = grid_mv[i, j, k, a] / m + dt * gravity[a]
                    if va > v_max:
                        va = v_max
                    elif va < -v_max:
                        va = -v_max
                    vel[a] = va
                if knife_on:
                    p[0] = origin[0] + i * dx
                    p[1] = origin[1] + j * dx
                    p[2] = origin[2] + k * dx
                    if knife_sdf(p, kc, krot, khalf) < band:
                        knife_normal(p, kc, krot, khalf, nrm)
                        r0 = p[0] - kc[0]
                        r1 = p[1] - kc[1]
                        r2 = p[2] - kc[2]
                        vs[0] = kv[0] + kw[1] * r2 - kw[2] * r1
                        vs[1] = kv[1] + kw[2] * r0 - kw[0] * r2
                        vs[2] = kv[2] + kw[0] * r1 - kw[1] * r0
                        if contact_project(vel, vs, nrm, kmu, out):
                            contacts += 1
                            for a in range(3):
                                impulse[a] += m * (out[a] - vel[a])
                                vel[a] = out[a]
                if k < bound and sticky_floor:
                    vel[0] = 0.0
                    vel[1] = 0.0
                    vel[2] = 0.0
                else:
                    if i < bound and vel[0] < 0.0:
                        vel[0] = 0.0
                    if i >= n0 - bound and vel[0] > 0.0:
                        vel[0] = 0.0
                    if j < bound and vel[1] < 0.0:
                        vel[1] = 0.0
                    if j >= n1 - bound and vel[1] > 0.0:
                        vel[1] = 0.0
                    if k < bound and vel[2] < 0.0:
                        vel[2] = 0.0
                    if k >= n2 - bound and vel[2] > 0.0:
                        vel[2] = 0.0
                grid_mv[i, j, k, 0] = vel[0]
                grid_mv[i, j, k, 1] = vel[1]
                grid_mv[i, j, k, 2] = vel[2]
    return contacts


@njit(cache=True, error_model="numpy")
def g2p_kernel(x, v, C, F, Vc, Rc, mat, lam, mu, ys, origin, inv_dx, dt, grid_v,
               plastic, lo, hi):
    """Gather velocities, update F with plasticity, advect and clamp positions.

    Returns -1, or the index of the first particle whose det(F) became non-positive.
    """
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    sig = np.empty(3)
    Fn = np.empty((3, 3))
    B = np.empty((3, 3))
    w = np.empty((3, 3))
    fx = np.empty(3)
    vp = np.empty(3)
    base = np.empty(3, dtype=np.int64)
    dx = 1.0 / inv_dx
    cscale = 4.0 * inv_dx * inv_dx
    for p in range(x.shape[0]):
        for a in range(3):
            loc = (x[p, a] - origin[a]) * inv_dx
            b = int(math.floor(loc - 0.5))
            base[a] = b
            f = loc - b
            fx[a] = f
            w[a, 0] = 0.5 * (1.5 - f) ** 2
            w[a, 1] = 0.75 - (f - 1.0) ** 2
            w[a, 2] = 0.5 * (f - 0.5) ** 2
        for a in range(3):
            vp[a] = 0.0
            for c in range(3):
                B[a, c] = 0.0
        for i in range(3):
            di = (i - fx[0]) * dx
            for j in range(3):
                dj = (j - fx[1]) * dx
                wij = w[0, i] * w[1, j]
                for k in range(3):
                    dk = (k - fx[2]) * dx
                    wt = wij * w[2, k]
                    for a in range(3):
                        ga = grid_v[base[0] + i, base[1] + j, base[2] + k, a]
                        vp[a] += wt * ga
                        B[a, 0] += wt * ga * di
                        B[a, 1] += wt * ga * dj
                        B[a, 2] += wt * ga * dk
        for a in range(3):
            v[p, a] = vp[a]
            for c in range(3):
                C[p, a, c] = cscale * B[a, c]
        # F <- (I + dt C) F
        for a in range(3):
            for c in range(3):
                acc = F[p, a, c]
                for k in range(3):
                    acc += dt * C[p, a, k] * F[p, k, c]
                Fn[a, c] = acc
        if not det3(Fn) > 0.0:
            return p
        for a in range(3):
            for c in range(3):
                V[a, c] = Vc[p, a, c]
        m_id = mat[p]
        if plastic:
            return_map_inplace(Fn, lam[m_id], mu[m_id], ys[m_id], U, sig, V)
        else:
            svd3_warm(Fn, U, sig, V)
        for a in range(3):
            for c in range(3):
                F[p, a, c] = Fn[a, c]
                Vc[p, a, c] = V[a, c]
                Rc[p, a, c] = U[a, 0] * V[c, 0] + U[a, 1] * V[c, 1] + U[a, 2] * V[c, 2]
        for a in range(3):
            xa = x[p, a] + dt * vp[a]
            if xa < lo[a]:
                xa = lo[a]
            elif xa > hi[a]:
                xa = hi[a]
            x[p, a] = xa
    return -1


@njit(cache=True, error_model="numpy")
def bone_hits(x, mat, center, rot, half):
    count = 0
    for p in range(x.shape[0]):
        if mat[p] != BONE:
            continue
        r0 = x[p, 0] - center[0]
        r1 = x[p, 1] - center[1]
        r2 = x[p, 2] - center[2]
        q0 = rot[0, 0] * r0 + rot[1, 0] * r1 + rot[2, 0] * r2
        q1 = rot[0, 1] * r0 + rot[1, 1] * r1 + rot[2, 1] * r2
        q2 = rot[0, 2] * r0 + rot[1, 2] * r1 + rot[2, 2] * r2
        if box_sdf_local(q0, q1, q2, half[0], half[1], half[2]) < 0.0:
            count += 1
    return count


@njit(cache=True, error_model="numpy")
def refresh_polar(F, Vc, Rc):
    """Recompute the cached SVD frame and polar rotation of every particle."""
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    sig = np.empty(3)
    Fp = np.empty((3, 3))
    for p in range(F.shape[0]):
        for a in range(3):
            for c in range(3):
                Fp[a, c] = F[p, a, c]
        svd3(Fp, U, sig, V)
        for a in range(3):
            for c in range(3):
                Vc[p, a, c] = V[a, c]
                Rc[p, a, c] = U[a, 0] * V[c, 0] + U[a, 1] * V[c, 1] + U[a, 2] * V[c, 2]
