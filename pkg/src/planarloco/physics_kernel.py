"""Numba inner loop of the planar-biped simulator.

One function advances one environment by `substeps` semi-implicit Euler
substeps; the batched entry point parallelizes over independent environments.
The math mirrors the numpy helpers in :mod:`planarloco.physics` (point
Jacobians, spring-damper contacts with a stick-slip anchor); it is written
loop-style so numba can compile it.
"""

import numba
import numpy as np
from numba import njit, prange

N_LINKS = 9
N_JOINTS = 8
NQ = 11


@njit(cache=True, fastmath=False)
def _terrain_h(heights, x0, dx, x):
    g = (x - x0) / dx
    if g < 0.0:
        g = 0.0
    gmax = heights.shape[0] - 1.001
    if g > gmax:
        g = gmax
    i0 = int(g)
    f = g - i0
    return heights[i0] * (1.0 - f) + heights[i0 + 1] * f


@njit(cache=True, fastmath=False)
def _env_step(qpos, qvel, torques, heights, x0, hdx, friction, gravity,
              lm, li, com_shift, ext_f, ext_t,
              anchor, dt, substeps, pinned,
              jparent, anchor_local, com_local, chain_mask,
              contact_links, contact_local, jlim_lo, jlim_hi,
              kn, dn, kt, dtan,
              out_cf, out_ca, out_cp, out_misc, out_qacc):
    """Advance one environment in place; contact/com diagnostics in out_*."""
    nc = contact_links.shape[0]
    # refuse to integrate an already-diverged state (keeps solve() well-posed)
    ok = True
    for u in range(NQ):
        if not (np.isfinite(qpos[u]) and np.isfinite(qvel[u])):
            ok = False
        elif abs(qpos[u]) > 1e6 or abs(qvel[u]) > 1e6:
            ok = False
    if not ok:
        for i in range(nc):
            out_cf[i, 0] = 0.0
            out_cf[i, 1] = 0.0
            out_ca[i] = 0.0
            out_cp[i, 0] = 0.0
            out_cp[i, 1] = 0.0
        for u in range(7):
            out_misc[u] = 0.0
        out_misc[6] = 1.0
        for u in range(NQ):
            out_qacc[u] = 0.0
        return
    phi = np.empty(N_LINKS)
    origins = np.empty((N_LINKS, 2))
    anchors = np.empty((N_JOINTS, 2))
    coms = np.empty((N_LINKS, 2))
    cpts = np.empty((nc, 2))
    v_anch = np.empty((N_JOINTS, 2))
    v_com = np.empty((N_LINKS, 2))
    v_cp = np.empty((nc, 2))
    M = np.empty((NQ, NQ))
    rhs = np.empty(NQ)
    bias = np.empty(2)
    tot_fx = 0.0
    tot_fz = 0.0

    for _ in range(substeps):
        # forward kinematics
        phi[0] = qpos[2]
        for j in range(N_JOINTS):
            phi[j + 1] = phi[jparent[j]] + qpos[3 + j]
        origins[0, 0] = qpos[0]
        origins[0, 1] = qpos[1]
        for j in range(N_JOINTS):
            p = jparent[j]
            c = np.cos(phi[p])
            s = np.sin(phi[p])
            ax = anchor_local[j, 0]
            az = anchor_local[j, 1]
            anchors[j, 0] = origins[p, 0] + c * ax - s * az
            anchors[j, 1] = origins[p, 1] + s * ax + c * az
            origins[j + 1, 0] = anchors[j, 0]
            origins[j + 1, 1] = anchors[j, 1]
        for k in range(N_LINKS):
            c = np.cos(phi[k])
            s = np.sin(phi[k])
            cx = com_local[k, 0] + (com_shift if k == 0 else 0.0)
            cz = com_local[k, 1]
            coms[k, 0] = origins[k, 0] + c * cx - s * cz
            coms[k, 1] = origins[k, 1] + s * cx + c * cz
        for i in range(nc):
            k = contact_links[i]
            c = np.cos(phi[k])
            s = np.sin(phi[k])
            cpts[i, 0] = origins[k, 0] + c * contact_local[i, 0] - s * contact_local[i, 1]
            cpts[i, 1] = origins[k, 1] + s * contact_local[i, 0] + c * contact_local[i, 1]

        # point velocities: v = (qd0, qd1) + qd2*S(p-base) + sum_j qd_j*S(p-anchor_j)
        bx = qpos[0]
        bz = qpos[1]
        for j in range(N_JOINTS):
            vx = qvel[0] - qvel[2] * (anchors[j, 1] - bz)
            vz = qvel[1] + qvel[2] * (anchors[j, 0] - bx)
            pk = jparent[j]
            for j2 in range(N_JOINTS):
                w = qvel[3 + j2] * chain_mask[pk, j2]
                if w != 0.0:
                    vx -= w * (anchors[j, 1] - anchors[j2, 1])
                    vz += w * (anchors[j, 0] - anchors[j2, 0])
            v_anch[j, 0] = vx
            v_anch[j, 1] = vz
        for k in range(N_LINKS):
            vx = qvel[0] - qvel[2] * (coms[k, 1] - bz)
            vz = qvel[1] + qvel[2] * (coms[k, 0] - bx)
            for j in range(N_JOINTS):
                w = qvel[3 + j] * chain_mask[k, j]
                if w != 0.0:
                    vx -= w * (coms[k, 1] - anchors[j, 1])
                    vz += w * (coms[k, 0] - anchors[j, 0])
            v_com[k, 0] = vx
            v_com[k, 1] = vz
        for i in range(nc):
            k = contact_links[i]
            vx = qvel[0] - qvel[2] * (cpts[i, 1] - bz)
            vz = qvel[1] + qvel[2] * (cpts[i, 0] - bx)
            for j in range(N_JOINTS):
                w = qvel[3 + j] * chain_mask[k, j]
                if w != 0.0:
                    vx -= w * (cpts[i, 1] - anchors[j, 1])
                    vz += w * (cpts[i, 0] - anchors[j, 0])
            v_cp[i, 0] = vx
            v_cp[i, 1] = vz

        # mass matrix and rhs
        for u in range(NQ):
            rhs[u] = 0.0
            for v in range(NQ):
                M[u, v] = 0.0
        for j in range(N_JOINTS):
            rhs[3 + j] = torques[j]
        tot_fx = 0.0
        tot_fz = 0.0

        for k in range(N_LINKS):
            # compact Jacobian columns of the link CoM
            jx = np.zeros(NQ)
            jz = np.zeros(NQ)
            jx[0] = 1.0
            jz[1] = 1.0
            jx[2] = -(coms[k, 1] - bz)
            jz[2] = coms[k, 0] - bx
            for j in range(N_JOINTS):
                if chain_mask[k, j] != 0.0:
                    jx[3 + j] = -(coms[k, 1] - anchors[j, 1])
                    jz[3 + j] = coms[k, 0] - anchors[j, 0]
            # velocity-product acceleration of the CoM
            bias[0] = qvel[2] * -(v_com[k, 1] - qvel[1])
            bias[1] = qvel[2] * (v_com[k, 0] - qvel[0])
            for j in range(N_JOINTS):
                w = qvel[3 + j] * chain_mask[k, j]
                if w != 0.0:
                    bias[0] -= w * (v_com[k, 1] - v_anch[j, 1])
                    bias[1] += w * (v_com[k, 0] - v_anch[j, 0])
            fxk = lm[k] * (0.0 - bias[0]) + ext_f[k, 0]
            fzk = lm[k] * (-gravity - bias[1]) + ext_f[k, 1]
            tot_fx += ext_f[k, 0]
            tot_fz += ext_f[k, 1] - lm[k] * gravity
            for u in range(NQ):
                ju_x = jx[u]
                ju_z = jz[u]
                if ju_x != 0.0 or ju_z != 0.0:
                    rhs[u] += ju_x * fxk + ju_z * fzk
                    mk = lm[k]
                    for v in range(u, NQ):
                        M[u, v] += mk * (ju_x * jx[v] + ju_z * jz[v])
            # rotational inertia: columns 2 and chain joints
            M[2, 2] += li[k]
            for j in range(N_JOINTS):
                if chain_mask[k, j] != 0.0:
                    M[2, 3 + j] += li[k]
                    for j2 in range(j, N_JOINTS):
                        if chain_mask[k, j2] != 0.0:
                            M[3 + j, 3 + j2] += li[k]
            # external torque on this link: theta column + chain columns
            if ext_t[k] != 0.0:
                rhs[2] += ext_t[k]
                for j in range(N_JOINTS):
                    if chain_mask[k, j] != 0.0:
                        rhs[3 + j] += ext_t[k]

        # contacts: spring-damper normal + stick-slip tangential anchor
        for i in range(nc):
            h = _terrain_h(heights, x0, hdx, cpts[i, 0])
            pen = h - cpts[i, 1]
            if pen > 0.0:
                fn = kn * pen - dn * v_cp[i, 1]
                if fn < 0.0:
                    fn = 0.0
                if not np.isfinite(anchor[i]):
                    anchor[i] = cpts[i, 0]
                ft = -kt * (cpts[i, 0] - anchor[i]) - dtan * v_cp[i, 0]
                cap = friction * fn
                if ft > cap:
                    ft = cap
                    anchor[i] = cpts[i, 0] + (ft + dtan * v_cp[i, 0]) / kt
                elif ft < -cap:
                    ft = -cap
                    anchor[i] = cpts[i, 0] + (ft + dtan * v_cp[i, 0]) / kt
                out_cf[i, 0] = ft
                out_cf[i, 1] = fn
                out_ca[i] = 1.0
                tot_fx += ft
                tot_fz += fn
                k = contact_links[i]
                rhs[0] += ft
                rhs[1] += fn
                rhs[2] += -ft * (cpts[i, 1] - bz) + fn * (cpts[i, 0] - bx)
                for j in range(N_JOINTS):
                    if chain_mask[k, j] != 0.0:
                        rhs[3 + j] += -ft * (cpts[i, 1] - anchors[j, 1]) + fn * (cpts[i, 0] - anchors[j, 0])
            else:
                anchor[i] = np.nan
                out_cf[i, 0] = 0.0
                out_cf[i, 1] = 0.0
                out_ca[i] = 0.0
            out_cp[i, 0] = cpts[i, 0]
            out_cp[i, 1] = cpts[i, 1]

        # symmetrize and solve
        for u in range(NQ):
            for v in range(u + 1, NQ):
                M[v, u] = M[u, v]
        if pinned:
            sub = np.linalg.solve(np.ascontiguousarray(M[3:, 3:]),
                                  np.ascontiguousarray(rhs[3:]))
            for u in range(3):
                out_qacc[u] = 0.0
            for u in range(N_JOINTS):
                out_qacc[3 + u] = sub[u]
        else:
            sol = np.linalg.solve(M, rhs)
            for u in range(NQ):
                out_qacc[u] = sol[u]
        for u in range(NQ):
            qvel[u] += dt * out_qacc[u]
            qpos[u] += dt * qvel[u]
        # hard joint limits
        for j in range(N_JOINTS):
            if qpos[3 + j] < jlim_lo[j]:
                qpos[3 + j] = jlim_lo[j]
                if qvel[3 + j] < 0.0:
                    qvel[3 + j] = 0.0
            elif qpos[3 + j] > jlim_hi[j]:
                qpos[3 + j] = jlim_hi[j]
                if qvel[3 + j] > 0.0:
                    qvel[3 + j] = 0.0

    # diagnostics from the final configuration
    mtot = 0.0
    cx = 0.0
    cz = 0.0
    cvx = 0.0
    cvz = 0.0
    phi[0] = qpos[2]
    for j in range(N_JOINTS):
        phi[j + 1] = phi[jparent[j]] + qpos[3 + j]
    origins[0, 0] = qpos[0]
    origins[0, 1] = qpos[1]
    for j in range(N_JOINTS):
        p = jparent[j]
        c = np.cos(phi[p])
        s = np.sin(phi[p])
        anchors[j, 0] = origins[p, 0] + c * anchor_local[j, 0] - s * anchor_local[j, 1]
        anchors[j, 1] = origins[p, 1] + s * anchor_local[j, 0] + c * anchor_local[j, 1]
        origins[j + 1, 0] = anchors[j, 0]
        origins[j + 1, 1] = anchors[j, 1]
    for k in range(N_LINKS):
        c = np.cos(phi[k])
        s = np.sin(phi[k])
        ccx = com_local[k, 0] + (com_shift if k == 0 else 0.0)
        ccz = com_local[k, 1]
        px = origins[k, 0] + c * ccx - s * ccz
        pz = origins[k, 1] + s * ccx + c * ccz
        vx = qvel[0] - qvel[2] * (pz - qpos[1])
        vz = qvel[1] + qvel[2] * (px - qpos[0])
        for j in range(N_JOINTS):
            w = qvel[3 + j] * chain_mask[k, j]
            if w != 0.0:
                vx -= w * (pz - anchors[j, 1])
                vz += w * (px - anchors[j, 0])
        mtot += lm[k]
        cx += lm[k] * px
        cz += lm[k] * pz
        cvx += lm[k] * vx
        cvz += lm[k] * vz
    out_misc[0] = cx / mtot
    out_misc[1] = cz / mtot
    out_misc[2] = cvx / mtot
    out_misc[3] = cvz / mtot
    out_misc[4] = tot_fx / mtot
    out_misc[5] = tot_fz / mtot
    div = 0.0
    for u in range(NQ):
        if not (np.isfinite(qpos[u]) and np.isfinite(qvel[u])):
            div = 1.0
        elif abs(qpos[u]) > 1e6 or abs(qvel[u]) > 1e6:
            div = 1.0
    out_misc[6] = div


@njit(cache=True, parallel=True, fastmath=False)
def step_kernel(qpos, qvel, torques, heights, x0, hdx, friction, gravity,
                lm, li, com_shift, ext_f, ext_t, anchor, dt, substeps, pinned,
                jparent, anchor_local, com_local, chain_mask,
                contact_links, contact_local, jlim_lo, jlim_hi,
                kn, dn, kt, dtan,
                out_cf, out_ca, out_cp, out_misc, out_qacc):
    n = qpos.shape[0]
    for i in prange(n):
        _env_step(qpos[i], qvel[i], torques[i], heights[i], x0, hdx,
                  friction[i], gravity[i], lm[i], li[i], com_shift[i],
                  ext_f[i], ext_t[i], anchor[i], dt, substeps, pinned,
                  jparent, anchor_local, com_local, chain_mask,
                  contact_links, contact_local, jlim_lo, jlim_hi,
                  kn, dn, kt, dtan,
                  out_cf[i], out_ca[i], out_cp[i], out_misc[i], out_qacc[i])
