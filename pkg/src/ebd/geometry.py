"""Rigid-body alignment, RMSD, centring, random rotations and assignment."""

import numpy as np

from . import _kernels


def remove_mean(x):
    """Translate ``x`` (n x 3) so that its column means are zero."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=0, keepdims=True)


def _check_coords(x, name):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def kabsch(P, Q):
    """Optimal proper rotation aligning centred ``P`` onto centred ``Q``.

    Returns ``R`` minimising ``||Q - P @ R.T||_F``. Reflections are never
    returned. For collinear inputs the smallest-angle rotation that maps the
    principal axis of ``P`` onto that of ``Q`` is chosen, so the result is
    deterministic.
    """
    P = _check_coords(P, "P")
    Q = _check_coords(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    if P.shape[0] < 2:
        raise ValueError("kabsch needs at least two points")
    return _kernels.kabsch_rotation(P, Q)


def aligned_rmsd(P, Q):
    """RMSD after centring both sets and Kabsch-aligning ``P`` onto ``Q``."""
    P = _check_coords(P, "P")
    Q = _check_coords(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    P = remove_mean(P)
    Q = remove_mean(Q)
    if P.shape[0] < 2:
        return 0.0
    R = _kernels.kabsch_rotation(P, Q)
    diff = P @ R.T - Q
    return float(np.sqrt(np.sum(diff * diff) / P.shape[0]))


def rmsd_matrix(A, B):
    """Aligned RMSD between every conformer of ``A`` and every conformer of ``B``.

    ``A`` and ``B`` are sequences of n x 3 arrays (same n); the result has
    shape ``(len(A), len(B))``.
    """
    A = np.stack([remove_mean(_check_coords(a, "A")) for a in A])
    B = np.stack([remove_mean(_check_coords(b, "B")) for b in B])
    if A.shape[1:] != B.shape[1:]:
        raise ValueError(f"atom count mismatch: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[1] < 2:
        return np.zeros((A.shape[0], B.shape[0]))
    return _kernels.rmsd_matrix(np.ascontiguousarray(A), np.ascontiguousarray(B))


def random_rotation(seed):
    """Uniformly distributed rotation matrix from a unit quaternion."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def linear_sum_assignment(cost):
    """Minimum-cost perfect matching on a square cost matrix.

    Returns ``perm`` such that row ``i`` is assigned to column ``perm[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _kernels.hungarian(np.ascontiguousarray(cost))
