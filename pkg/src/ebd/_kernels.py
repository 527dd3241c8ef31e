"""Hot numeric kernels.

Every kernel has two implementations: a loop form compiled with numba
(``*_nb``) and a vectorised numpy form (``*_np``). The public names at the
bottom of the module dispatch on ``_accel.HAS_NUMBA``; both forms stay
importable so tests and the benchmark can compare them directly.
"""

import numpy as np

from ._accel import HAS_NUMBA, njit

# sigma_2 / sigma_1 below this is treated as a collinear (rank-1) point set
RANK1_TOL = 1e-7
# sigma_1 below this (absolute) means every point sits at the origin
ZERO_TOL = 1e-300


# ---------------------------------------------------------------------------
# symmetric eigensolver (cyclic Jacobi)
# ---------------------------------------------------------------------------


@njit
def jacobi_eigh_nb(S, tol=1e-12, max_sweeps=100):
    n = S.shape[0]
    A = S.copy()
    V = np.eye(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += A[i, j] * A[i, j]
    scale = max(1.0, np.sqrt(scale))
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        if np.sqrt(2.0 * off) < tol * scale:
            break
        for p in range(n):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = A[i, i]
    order = np.argsort(w)
    return w[order], V[:, order]


def jacobi_eigh_np(S, tol=1e-12, max_sweeps=100):
    """Same cyclic sweep as the loop form, rotations applied to whole rows and columns."""
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(1.0, np.sqrt(np.sum(A * A)))
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        if np.sqrt(2.0 * np.sum(A[iu] ** 2)) < tol * scale:
            break
        for p in range(n):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.copysign(1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0)), theta)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cols = A[:, [p, q]]
                A[:, p] = c * cols[:, 0] - s * cols[:, 1]
                A[:, q] = s * cols[:, 0] + c * cols[:, 1]
                rows = A[[p, q], :]
                A[p, :] = c * rows[0] - s * rows[1]
                A[q, :] = s * rows[0] + c * rows[1]
                vc = V[:, [p, q]]
                V[:, p] = c * vc[:, 0] - s * vc[:, 1]
                V[:, q] = s * vc[:, 0] + c * vc[:, 1]
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


# ---------------------------------------------------------------------------
# Kabsch rotation
# ---------------------------------------------------------------------------


@njit
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit
def _min_rotation_nb(a, b):
    """Smallest-angle proper rotation R with R a = b, for unit vectors a, b."""
    k = _cross(a, b)
    c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    s2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2]
    R = np.eye(3)
    if s2 < 1e-24:
        if c > 0.0:
            return R
        # antiparallel: half turn about the coordinate axis least aligned with a
        ax = 0
        for i in range(1, 3):
            if abs(a[i]) < abs(a[ax]):
                ax = i
        e = np.zeros(3)
        e[ax] = 1.0
        perp = _cross(a, e)
        nrm = np.sqrt(perp[0] ** 2 + perp[1] ** 2 + perp[2] ** 2)
        for i in range(3):
            perp[i] /= nrm
        for i in range(3):
            for j in range(3):
                R[i, j] = 2.0 * perp[i] * perp[j] - (1.0 if i == j else 0.0)
        return R
    K = np.zeros((3, 3))
    K[0, 1] = -k[2]
    K[0, 2] = k[1]
    K[1, 0] = k[2]
    K[1, 2] = -k[0]
    K[2, 0] = -k[1]
    K[2, 1] = k[0]
    f = 1.0 / (1.0 + c)
    for i in range(3):
        for j in range(3):
            kk = 0.0
            for m in range(3):
                kk += K[i, m] * K[m, j]
            R[i, j] += K[i, j] + f * kk
    return R


@njit
def kabsch_nb(P, Q):
    """Proper rotation R minimising ||Q - P R^T||_F for centred P, Q (n x 3)."""
    n = P.shape[0]
    H = np.zeros((3, 3))
    for i in range(n):
        for a in range(3):
            for b in range(3):
                H[a, b] += P[i, a] * Q[i, b]
    S = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            acc = 0.0
            for c in range(3):
                acc += H[c, a] * H[c, b]
            S[a, b] = acc
    w, V = jacobi_eigh_nb(S, 1e-15, 100)
    # descending order
    sig = np.empty(3)
    Vd = np.empty((3, 3))
    for i in range(3):
        sig[i] = np.sqrt(max(w[2 - i], 0.0))
        for r in range(3):
            Vd[r, i] = V[r, 2 - i]
    if sig[0] <= ZERO_TOL:
        return np.eye(3)
    v1 = Vd[:, 0].copy()
    u1 = np.zeros(3)
    for a in range(3):
        for b in range(3):
            u1[a] += H[a, b] * v1[b]
    nrm = np.sqrt(u1[0] ** 2 + u1[1] ** 2 + u1[2] ** 2)
    for a in range(3):
        u1[a] /= nrm
    if sig[1] <= RANK1_TOL * sig[0]:
        return _min_rotation_nb(u1, v1)
    v2 = Vd[:, 1].copy()
    u2 = np.zeros(3)
    for a in range(3):
        for b in range(3):
            u2[a] += H[a, b] * v2[b]
    d = u1[0] * u2[0] + u1[1] * u2[1] + u1[2] * u2[2]
    for a in range(3):
        u2[a] -= d * u1[a]
    nrm = np.sqrt(u2[0] ** 2 + u2[1] ** 2 + u2[2] ** 2)
    for a in range(3):
        u2[a] /= nrm
    u3 = _cross(u1, u2)
    v3 = _cross(v1, v2)
    # v3 from the cross product makes det(V) = +1, which is the reflection fix
    R = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            R[a, b] = v1[a] * u1[b] + v2[a] * u2[b] + v3[a] * u3[b]
    return R


def _min_rotation_np(a, b):
    k = np.cross(a, b)
    c = float(a @ b)
    if k @ k < 1e-24:
        if c > 0.0:
            return np.eye(3)
        e = np.zeros(3)
        e[int(np.argmin(np.abs(a)))] = 1.0
        perp = np.cross(a, e)
        perp /= np.linalg.norm(perp)
        return 2.0 * np.outer(perp, perp) - np.eye(3)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + K + (K @ K) / (1.0 + c)


def _rotations_from_cov_np(H):
    """Batched Kabsch rotations from cross-covariances H (..., 3, 3)."""
    H = np.asarray(H, dtype=np.float64)
    shape = H.shape[:-2]
    Hf = H.reshape(-1, 3, 3)
    U, S, Vt = np.linalg.svd(Hf)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V) * np.linalg.det(U))
    d[d == 0] = 1.0
    D = np.ones((Hf.shape[0], 3))
    D[:, 2] = d
    R = np.einsum("bij,bj,bkj->bik", V, D, U)
    degenerate = (S[:, 0] <= ZERO_TOL) | (S[:, 1] <= RANK1_TOL * S[:, 0])
    for b in np.flatnonzero(degenerate):
        if S[b, 0] <= ZERO_TOL:
            R[b] = np.eye(3)
        else:
            R[b] = _min_rotation_np(U[b, :, 0], V[b, :, 0])
    return R.reshape(shape + (3, 3))


def kabsch_np(P, Q):
    return _rotations_from_cov_np(P.T @ Q)


# ---------------------------------------------------------------------------
# pairwise aligned RMSD
# ---------------------------------------------------------------------------


@njit
def rmsd_matrix_nb(A, B):
    """Aligned RMSD between every centred A[i] and B[j]; A (a,n,3), B (b,n,3)."""
    na = A.shape[0]
    nb = B.shape[0]
    n = A.shape[1]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            R = kabsch_nb(A[i], B[j])
            acc = 0.0
            for k in range(n):
                for a in range(3):
                    x = R[a, 0] * A[i, k, 0] + R[a, 1] * A[i, k, 1] + R[a, 2] * A[i, k, 2]
                    diff = x - B[j, k, a]
                    acc += diff * diff
            out[i, j] = np.sqrt(acc / n)
    return out


def rmsd_matrix_np(A, B):
    n = A.shape[1]
    H = np.einsum("ikc,jkd->ijcd", A, B)
    R = _rotations_from_cov_np(H)
    rotated = np.einsum("ijab,ikb->ijka", R, A)
    diff = rotated - B[None, :, :, :]
    return np.sqrt(np.einsum("ijka,ijka->ij", diff, diff) / n)


# ---------------------------------------------------------------------------
# linear sum assignment (Hungarian with potentials)
# ---------------------------------------------------------------------------


@njit
def _hungarian_loop(cost):
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


hungarian_nb = _hungarian_loop
# the loop is already plain numpy-indexed python when numba is absent
hungarian_np = getattr(_hungarian_loop, "py_func", _hungarian_loop)


# ---------------------------------------------------------------------------
# weighted stress majorisation (SMACOF)
# ---------------------------------------------------------------------------


@njit
def _stress_nb(X, D, W):
    n = X.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d = np.sqrt((X[i, 0] - X[j, 0]) ** 2 + (X[i, 1] - X[j, 1]) ** 2 + (X[i, 2] - X[j, 2]) ** 2)
            s += W[i, j] * (d - D[i, j]) ** 2
    return s


@njit
def smacof_nb(D, W, Vp, X0, max_iter, tol):
    n = X0.shape[0]
    X = X0.copy()
    stress = _stress_nb(X, D, W)
    best = X.copy()
    best_stress = stress
    converged = False
    it = 0
    BX = np.empty((n, 3))
    for it in range(1, max_iter + 1):
        for i in range(n):
            for a in range(3):
                BX[i, a] = 0.0
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                d = np.sqrt((X[i, 0] - X[j, 0]) ** 2 + (X[i, 1] - X[j, 1]) ** 2 + (X[i, 2] - X[j, 2]) ** 2)
                if d > 1e-12:
                    b = W[i, j] * D[i, j] / d
                    for a in range(3):
                        BX[i, a] += b * (X[i, a] - X[j, a])
        Xn = np.zeros((n, 3))
        for i in range(n):
            for k in range(n):
                v = Vp[i, k]
                for a in range(3):
                    Xn[i, a] += v * BX[k, a]
        X = Xn
        new_stress = _stress_nb(X, D, W)
        if new_stress < best_stress:
            best_stress = new_stress
            best = X.copy()
        rel = (stress - new_stress) / max(stress, 1e-300)
        stress = new_stress
        if stress < 1e-20 or abs(rel) < tol:
            converged = True
            break
    return best, best_stress, it, converged


def _stress_np(X, D, W):
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return 0.5 * float(np.sum(W * (dist - D) ** 2))


def smacof_np(D, W, Vp, X0, max_iter, tol):
    X = X0.copy()
    stress = _stress_np(X, D, W)
    best, best_stress = X.copy(), stress
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        diff = X[:, None, :] - X[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 1e-12, W * D / dist, 0.0)
        np.fill_diagonal(ratio, 0.0)
        BX = ratio.sum(axis=1)[:, None] * X - ratio @ X
        X = Vp @ BX
        new_stress = _stress_np(X, D, W)
        if new_stress < best_stress:
            best, best_stress = X.copy(), new_stress
        rel = (stress - new_stress) / max(stress, 1e-300)
        stress = new_stress
        if stress < 1e-20 or abs(rel) < tol:
            converged = True
            break
    return best, best_stress, it, converged


if HAS_NUMBA:
    jacobi_eigh = jacobi_eigh_nb
    kabsch_rotation = kabsch_nb
    rmsd_matrix = rmsd_matrix_nb
    hungarian = hungarian_nb
    smacof = smacof_nb
else:
    jacobi_eigh = jacobi_eigh_np
    kabsch_rotation = kabsch_np
    rmsd_matrix = rmsd_matrix_np
    hungarian = hungarian_np
    smacof = smacof_np
