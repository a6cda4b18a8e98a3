"""Numba kernels for the MPM step.

Layout: particle state is SoA float64 (x, v (N,3); C, F (N,3,3); mass, vol0
(N,); role (N,) uint8 with 0 = elastomer, 1 = rigid indenter). The grid is
dense (nx, ny, nz).

Determinism: P2G scatters into N_SCATTER_CHUNKS chunk-private grids (chunks
are fixed contiguous particle ranges, serial within a chunk) which are then
summed in fixed chunk order, one node per thread. Gather passes write only to
their own particle. Results are therefore bit-identical for any thread count.
"""

import math

import numpy as np
from numba import njit, prange

N_SCATTER_CHUNKS = 8

STATUS_OK = 0
STATUS_OUT_OF_DOMAIN = 1
STATUS_INVERTED = 2

TAG_FREE = 0
TAG_STICKY = 1
TAG_RIGID = 2


@njit(inline="always", cache=True)
def _polar_rotation(f00, f01, f02, f10, f11, f12, f20, f21, f22):
    """Rotation factor of the polar decomposition, by scaled Newton iteration.

    Converges quadratically near a rotation; determinantal scaling keeps the
    iteration fast for strongly stretched inputs. Caller guarantees det > 0.
    """
    r00, r01, r02 = f00, f01, f02
    r10, r11, r12 = f10, f11, f12
    r20, r21, r22 = f20, f21, f22
    for _ in range(60):
        c00 = r11 * r22 - r12 * r21
        c01 = r12 * r20 - r10 * r22
        c02 = r10 * r21 - r11 * r20
        c10 = r02 * r21 - r01 * r22
        c11 = r00 * r22 - r02 * r20
        c12 = r01 * r20 - r00 * r21
        c20 = r01 * r12 - r02 * r11
        c21 = r02 * r10 - r00 * r12
        c22 = r00 * r11 - r01 * r10
        det = r00 * c00 + r01 * c01 + r02 * c02
        g = abs(det) ** (-1.0 / 3.0)
        h = 0.5 / (g * det)
        g = 0.5 * g
        n00 = g * r00 + h * c00
        n01 = g * r01 + h * c01
        n02 = g * r02 + h * c02
        n10 = g * r10 + h * c10
        n11 = g * r11 + h * c11
        n12 = g * r12 + h * c12
        n20 = g * r20 + h * c20
        n21 = g * r21 + h * c21
        n22 = g * r22 + h * c22
        diff = abs(n00 - r00) + abs(n01 - r01) + abs(n02 - r02) \
            + abs(n10 - r10) + abs(n11 - r11) + abs(n12 - r12) \
            + abs(n20 - r20) + abs(n21 - r21) + abs(n22 - r22)
        r00, r01, r02 = n00, n01, n02
        r10, r11, r12 = n10, n11, n12
        r20, r21, r22 = n20, n21, n22
        if diff < 1e-13:
            break
    return r00, r01, r02, r10, r11, r12, r20, r21, r22


@njit(parallel=True, fastmath=True, cache=True)
def p2g(x, v, C, F, mass, vol0, role,
        cm, cmom, cbox, status,
        ox, oy, oz, inv_dx, dx, dt, mu, lam, with_elastic):
    """Scatter mass and momentum (APIC + elastic) into chunk-private grids."""
    n = x.shape[0]
    nchunk = cm.shape[0]
    nx = cm.shape[1]
    ny = cm.shape[2]
    nz = cm.shape[3]
    chunk_size = (n + nchunk - 1) // nchunk
    force_coef = -dt * 4.0 * inv_dx * inv_dx

    for c in prange(nchunk):
        status[c, 0] = STATUS_OK
        status[c, 1] = -1
        p0 = c * chunk_size
        p1 = min(n, p0 + chunk_size)
        bi0 = nx
        bj0 = ny
        bk0 = nz
        bi1 = -1
        bj1 = -1
        bk1 = -1
        wx = np.empty(3)
        wy = np.empty(3)
        wz = np.empty(3)
        px = np.empty(3)
        py = np.empty(3)
        pz = np.empty(3)
        for p in range(p0, p1):
            gx = (x[p, 0] - ox) * inv_dx
            gy = (x[p, 1] - oy) * inv_dx
            gz = (x[p, 2] - oz) * inv_dx
            bx = int(math.floor(gx - 0.5))
            by = int(math.floor(gy - 0.5))
            bz = int(math.floor(gz - 0.5))
            if bx < 0 or by < 0 or bz < 0 or bx > nx - 3 or by > ny - 3 or bz > nz - 3:
                if status[c, 0] == STATUS_OK:
                    status[c, 0] = STATUS_OUT_OF_DOMAIN
                    status[c, 1] = p
                continue
            fx = gx - bx
            fy = gy - by
            fz = gz - bz
            wx[0] = 0.5 * (1.5 - fx) ** 2
            wx[1] = 0.75 - (fx - 1.0) ** 2
            wx[2] = 0.5 * (fx - 0.5) ** 2
            wy[0] = 0.5 * (1.5 - fy) ** 2
            wy[1] = 0.75 - (fy - 1.0) ** 2
            wy[2] = 0.5 * (fy - 0.5) ** 2
            wz[0] = 0.5 * (1.5 - fz) ** 2
            wz[1] = 0.75 - (fz - 1.0) ** 2
            wz[2] = 0.5 * (fz - 0.5) ** 2
            for i in range(3):
                px[i] = (bx + i - gx) * dx
                py[i] = (by + i - gy) * dx
                pz[i] = (bz + i - gz) * dx

            m = mass[p]
            q00 = 0.0
            q01 = 0.0
            q02 = 0.0
            q10 = 0.0
            q11 = 0.0
            q12 = 0.0
            q20 = 0.0
            q21 = 0.0
            q22 = 0.0
            if role[p] == 0:
                if with_elastic != 0:
                    f00 = F[p, 0, 0]
                    f01 = F[p, 0, 1]
                    f02 = F[p, 0, 2]
                    f10 = F[p, 1, 0]
                    f11 = F[p, 1, 1]
                    f12 = F[p, 1, 2]
                    f20 = F[p, 2, 0]
                    f21 = F[p, 2, 1]
                    f22 = F[p, 2, 2]
                    J = (f00 * (f11 * f22 - f12 * f21)
                         - f01 * (f10 * f22 - f12 * f20)
                         + f02 * (f10 * f21 - f11 * f20))
                    if J <= 0.0:
                        if status[c, 0] == STATUS_OK:
                            status[c, 0] = STATUS_INVERTED
                            status[c, 1] = p
                        continue
                    r00, r01, r02, r10, r11, r12, r20, r21, r22 = _polar_rotation(
                        f00, f01, f02, f10, f11, f12, f20, f21, f22)
                    # stress = 2 mu (F - R) F^T + lam (J - 1) J I
                    d00 = f00 - r00
                    d01 = f01 - r01
                    d02 = f02 - r02
                    d10 = f10 - r10
                    d11 = f11 - r11
                    d12 = f12 - r12
                    d20 = f20 - r20
                    d21 = f21 - r21
                    d22 = f22 - r22
                    two_mu = 2.0 * mu
                    pres = lam * (J - 1.0) * J
                    s00 = two_mu * (d00 * f00 + d01 * f01 + d02 * f02) + pres
                    s01 = two_mu * (d00 * f10 + d01 * f11 + d02 * f12)
                    s02 = two_mu * (d00 * f20 + d01 * f21 + d02 * f22)
                    s10 = two_mu * (d10 * f00 + d11 * f01 + d12 * f02)
                    s11 = two_mu * (d10 * f10 + d11 * f11 + d12 * f12) + pres
                    s12 = two_mu * (d10 * f20 + d11 * f21 + d12 * f22)
                    s20 = two_mu * (d20 * f00 + d21 * f01 + d22 * f02)
                    s21 = two_mu * (d20 * f10 + d21 * f11 + d22 * f12)
                    s22 = two_mu * (d20 * f20 + d21 * f21 + d22 * f22) + pres
                    ec = force_coef * vol0[p]
                    q00 = ec * s00
                    q01 = ec * s01
                    q02 = ec * s02
                    q10 = ec * s10
                    q11 = ec * s11
                    q12 = ec * s12
                    q20 = ec * s20
                    q21 = ec * s21
                    q22 = ec * s22
                q00 += m * C[p, 0, 0]
                q01 += m * C[p, 0, 1]
                q02 += m * C[p, 0, 2]
                q10 += m * C[p, 1, 0]
                q11 += m * C[p, 1, 1]
                q12 += m * C[p, 1, 2]
                q20 += m * C[p, 2, 0]
                q21 += m * C[p, 2, 1]
                q22 += m * C[p, 2, 2]

            mv0 = m * v[p, 0]
            mv1 = m * v[p, 1]
            mv2 = m * v[p, 2]

            if bx < bi0:
                bi0 = bx
            if by < bj0:
                bj0 = by
            if bz < bk0:
                bk0 = bz
            if bx + 2 > bi1:
                bi1 = bx + 2
            if by + 2 > bj1:
                bj1 = by + 2
            if bz + 2 > bk1:
                bk1 = bz + 2

            for i in range(3):
                dp0 = px[i]
                a0 = q00 * dp0 + mv0
                a1 = q10 * dp0 + mv1
                a2 = q20 * dp0 + mv2
                wi = wx[i]
                ni = bx + i
                for j in range(3):
                    dp1 = py[j]
                    b0 = a0 + q01 * dp1
                    b1 = a1 + q11 * dp1
                    b2 = a2 + q21 * dp1
                    wij = wi * wy[j]
                    nj = by + j
                    for k in range(3):
                        dp2 = pz[k]
                        w = wij * wz[k]
                        nk = bz + k
                        cm[c, ni, nj, nk] += w * m
                        cmom[c, ni, nj, nk, 0] += w * (b0 + q02 * dp2)
                        cmom[c, ni, nj, nk, 1] += w * (b1 + q12 * dp2)
                        cmom[c, ni, nj, nk, 2] += w * (b2 + q22 * dp2)
        cbox[c, 0] = bi0
        cbox[c, 1] = bi1
        cbox[c, 2] = bj0
        cbox[c, 3] = bj1
        cbox[c, 4] = bk0
        cbox[c, 5] = bk1


@njit(parallel=True, fastmath=True, cache=True)
def reduce_chunks(cm, cmom, cbox, gm, gmom, u0, u1, u2, u3, u4, u5):
    """Sum chunk-private grids into the main grid (fixed chunk order) and zero them."""
    nchunk = cm.shape[0]
    for ii in prange(u1 + 1 - u0):
        i = u0 + ii
        for j in range(u2, u3 + 1):
            for k in range(u4, u5 + 1):
                am = 0.0
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                for c in range(nchunk):
                    if (cbox[c, 0] <= i <= cbox[c, 1]
                            and cbox[c, 2] <= j <= cbox[c, 3]
                            and cbox[c, 4] <= k <= cbox[c, 5]):
                        am += cm[c, i, j, k]
                        a0 += cmom[c, i, j, k, 0]
                        a1 += cmom[c, i, j, k, 1]
                        a2 += cmom[c, i, j, k, 2]
                        cm[c, i, j, k] = 0.0
                        cmom[c, i, j, k, 0] = 0.0
                        cmom[c, i, j, k, 1] = 0.0
                        cmom[c, i, j, k, 2] = 0.0
                gm[i, j, k] += am
                gmom[i, j, k, 0] += a0
                gmom[i, j, k, 1] += a1
                gmom[i, j, k, 2] += a2


@njit(parallel=True, cache=True)
def mark_rigid_nodes(xr, tag, ox, oy, oz, inv_dx, dx):
    """Tag grid nodes within one dx of any rigid particle.

    Races write the same tag value, so the result is scheduling-independent.
    """
    nx = tag.shape[0]
    ny = tag.shape[1]
    nz = tag.shape[2]
    dx2 = dx * dx
    for p in prange(xr.shape[0]):
        gx = (xr[p, 0] - ox) * inv_dx
        gy = (xr[p, 1] - oy) * inv_dx
        gz = (xr[p, 2] - oz) * inv_dx
        bx = int(math.floor(gx - 0.5))
        by = int(math.floor(gy - 0.5))
        bz = int(math.floor(gz - 0.5))
        for i in range(3):
            ni = bx + i
            if ni < 0 or ni >= nx:
                continue
            d0 = (ni - gx) * dx
            for j in range(3):
                nj = by + j
                if nj < 0 or nj >= ny:
                    continue
                d1 = (nj - gy) * dx
                for k in range(3):
                    nk = bz + k
                    if nk < 0 or nk >= nz:
                        continue
                    d2 = (nk - gz) * dx
                    if d0 * d0 + d1 * d1 + d2 * d2 <= dx2:
                        tag[ni, nj, nk] = TAG_RIGID


@njit(parallel=True, fastmath=True, cache=True)
def grid_update(gm, gmom, gv, tag, gx0, gx1, gx2, dt, mass_eps,
                ox, oy, oz, dx, rv0, rv1, rv2, rw0, rw1, rw2, ra0, ra1, ra2):
    """Node velocities: V = MG/M (guarded), then gravity, then BC overrides."""
    nx = gm.shape[0]
    ny = gm.shape[1]
    nz = gm.shape[2]
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                t = tag[i, j, k]
                if t == TAG_RIGID:
                    # rigid-body velocity field evaluated at the node
                    X0 = ox + i * dx - ra0
                    X1 = oy + j * dx - ra1
                    X2 = oz + k * dx - ra2
                    gv[i, j, k, 0] = rv0 + rw1 * X2 - rw2 * X1
                    gv[i, j, k, 1] = rv1 + rw2 * X0 - rw0 * X2
                    gv[i, j, k, 2] = rv2 + rw0 * X1 - rw1 * X0
                elif t == TAG_STICKY:
                    gv[i, j, k, 0] = 0.0
                    gv[i, j, k, 1] = 0.0
                    gv[i, j, k, 2] = 0.0
                else:
                    m = gm[i, j, k]
                    if m > mass_eps:
                        inv_m = 1.0 / m
                        gv[i, j, k, 0] = gmom[i, j, k, 0] * inv_m + gx0 * dt
                        gv[i, j, k, 1] = gmom[i, j, k, 1] * inv_m + gx1 * dt
                        gv[i, j, k, 2] = gmom[i, j, k, 2] * inv_m + gx2 * dt
                    else:
                        gv[i, j, k, 0] = 0.0
                        gv[i, j, k, 1] = 0.0
                        gv[i, j, k, 2] = 0.0


@njit(parallel=True, fastmath=True, cache=True)
def g2p(x, v, C, role, gv, ox, oy, oz, inv_dx):
    """Gather node velocities into particle velocity and affine velocity.

    Assumes every elastomer particle passed the P2G domain check this substep
    (positions have not moved in between).
    """
    n = x.shape[0]
    four_inv_dx = 4.0 * inv_dx
    for p in prange(n):
        if role[p] != 0:
            continue
        gx = (x[p, 0] - ox) * inv_dx
        gy = (x[p, 1] - oy) * inv_dx
        gz = (x[p, 2] - oz) * inv_dx
        bx = int(math.floor(gx - 0.5))
        by = int(math.floor(gy - 0.5))
        bz = int(math.floor(gz - 0.5))
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2
        nv0 = 0.0
        nv1 = 0.0
        nv2 = 0.0
        c00 = 0.0
        c01 = 0.0
        c02 = 0.0
        c10 = 0.0
        c11 = 0.0
        c12 = 0.0
        c20 = 0.0
        c21 = 0.0
        c22 = 0.0
        for i in range(3):
            if i == 0:
                wi = wx0
            elif i == 1:
                wi = wx1
            else:
                wi = wx2
            dp0 = (bx + i - gx)  # in cells; scaled by 4/dx at the end
            ni = bx + i
            for j in range(3):
                if j == 0:
                    wij = wi * wy0
                elif j == 1:
                    wij = wi * wy1
                else:
                    wij = wi * wy2
                dp1 = (by + j - gy)
                nj = by + j
                for k in range(3):
                    if k == 0:
                        w = wij * wz0
                    elif k == 1:
                        w = wij * wz1
                    else:
                        w = wij * wz2
                    dp2 = (bz + k - gz)
                    nk = bz + k
                    v0 = gv[ni, nj, nk, 0]
                    v1 = gv[ni, nj, nk, 1]
                    v2 = gv[ni, nj, nk, 2]
                    wv0 = w * v0
                    wv1 = w * v1
                    wv2 = w * v2
                    nv0 += wv0
                    nv1 += wv1
                    nv2 += wv2
                    c00 += wv0 * dp0
                    c01 += wv0 * dp1
                    c02 += wv0 * dp2
                    c10 += wv1 * dp0
                    c11 += wv1 * dp1
                    c12 += wv1 * dp2
                    c20 += wv2 * dp0
                    c21 += wv2 * dp1
                    c22 += wv2 * dp2
        v[p, 0] = nv0
        v[p, 1] = nv1
        v[p, 2] = nv2
        # accumulated with dpos in cell units: (4/dx²)·(dpos_cells·dx) = (4/dx)·dpos_cells
        C[p, 0, 0] = four_inv_dx * c00
        C[p, 0, 1] = four_inv_dx * c01
        C[p, 0, 2] = four_inv_dx * c02
        C[p, 1, 0] = four_inv_dx * c10
        C[p, 1, 1] = four_inv_dx * c11
        C[p, 1, 2] = four_inv_dx * c12
        C[p, 2, 0] = four_inv_dx * c20
        C[p, 2, 1] = four_inv_dx * c21
        C[p, 2, 2] = four_inv_dx * c22


@njit(parallel=True, fastmath=True, cache=True)
def deform_advect(x, v, C, F, role, dt, errs, max_speed2):
    """F <- (I + dt C) F for elastomer, advect everyone, track max speed²."""
    n = x.shape[0]
    nchunk = max_speed2.shape[0]
    chunk_size = (n + nchunk - 1) // nchunk
    for c in prange(nchunk):
        p0 = c * chunk_size
        p1 = min(n, p0 + chunk_size)
        ms = 0.0
        for p in range(p0, p1):
            v0 = v[p, 0]
            v1 = v[p, 1]
            v2 = v[p, 2]
            s = v0 * v0 + v1 * v1 + v2 * v2
            if s > ms:
                ms = s
            if role[p] == 0:
                a00 = 1.0 + dt * C[p, 0, 0]
                a01 = dt * C[p, 0, 1]
                a02 = dt * C[p, 0, 2]
                a10 = dt * C[p, 1, 0]
                a11 = 1.0 + dt * C[p, 1, 1]
                a12 = dt * C[p, 1, 2]
                a20 = dt * C[p, 2, 0]
                a21 = dt * C[p, 2, 1]
                a22 = 1.0 + dt * C[p, 2, 2]
                f00 = F[p, 0, 0]
                f01 = F[p, 0, 1]
                f02 = F[p, 0, 2]
                f10 = F[p, 1, 0]
                f11 = F[p, 1, 1]
                f12 = F[p, 1, 2]
                f20 = F[p, 2, 0]
                f21 = F[p, 2, 1]
                f22 = F[p, 2, 2]
                n00 = a00 * f00 + a01 * f10 + a02 * f20
                n01 = a00 * f01 + a01 * f11 + a02 * f21
                n02 = a00 * f02 + a01 * f12 + a02 * f22
                n10 = a10 * f00 + a11 * f10 + a12 * f20
                n11 = a10 * f01 + a11 * f11 + a12 * f21
                n12 = a10 * f02 + a11 * f12 + a12 * f22
                n20 = a20 * f00 + a21 * f10 + a22 * f20
                n21 = a20 * f01 + a21 * f11 + a22 * f21
                n22 = a20 * f02 + a21 * f12 + a22 * f22
                J = (n00 * (n11 * n22 - n12 * n21)
                     - n01 * (n10 * n22 - n12 * n20)
                     + n02 * (n10 * n21 - n11 * n20))
                if J <= 0.0:
                    errs[p] = 1
                F[p, 0, 0] = n00
                F[p, 0, 1] = n01
                F[p, 0, 2] = n02
                F[p, 1, 0] = n10
                F[p, 1, 1] = n11
                F[p, 1, 2] = n12
                F[p, 2, 0] = n20
                F[p, 2, 1] = n21
                F[p, 2, 2] = n22
            x[p, 0] += dt * v0
            x[p, 1] += dt * v1
            x[p, 2] += dt * v2
        max_speed2[c] = ms
