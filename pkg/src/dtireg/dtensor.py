"""Diffusion tensor math: signal model, WLLS fitting, eigensystem, FA/MD maps."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSchemeError, ValidationError
from .volgrid import LabelVolume, ScalarVolume, TensorVolume


@dataclass(frozen=True)
class DiffusionGradientScheme:
    """Acquisition scheme: b-values (s/mm^2) and unit gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.atleast_1d(np.asarray(self.bvals, dtype=np.float64))
        bvecs = np.atleast_2d(np.asarray(self.bvecs, dtype=np.float64))
        if bvecs.shape != (bvals.shape[0], 3):
            raise ValidationError("bvecs must be (n, 3) matching bvals")
        if np.any(bvals < 0):
            raise ValidationError("b-values must be non-negative")
        if not np.any(bvals == 0):
            raise ValidationError("scheme requires at least one b=0 entry")
        dw = bvals > 0
        norms = np.linalg.norm(bvecs[dw], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("b>0 gradient directions must be unit vectors")
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.shape[0]


@dataclass(frozen=True)
class TensorEigen:
    """Eigenvalues sorted descending, eigenvectors as matrix columns."""

    eigenvalues: np.ndarray  # (3,)
    eigenvectors: np.ndarray  # (3, 3), column i pairs with eigenvalue i

    def reconstruct(self):
        v = self.eigenvectors
        return v @ np.diag(self.eigenvalues) @ v.T


def predict_signal(D, S0, b, g):
    """Diffusion-weighted signal S0 * exp(-b g^T D g)."""
    if S0 <= 0:
        raise ValidationError("S0 must be positive")
    if b < 0:
        raise ValidationError("b must be non-negative")
    D = np.asarray(D, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return float(S0 * np.exp(-b * g @ D @ g))


def _design_matrix(scheme):
    b = scheme.bvals
    g = scheme.bvecs
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    # columns: ln S0, Dxx, Dxy, Dyy, Dxz, Dyz, Dzz (canonical order)
    return np.column_stack([
        np.ones_like(b),
        -b * gx * gx,
        -2 * b * gx * gy,
        -b * gy * gy,
        -2 * b * gx * gz,
        -2 * b * gy * gz,
        -b * gz * gz,
    ])


def fit_tensor(signals, scheme):
    """Weighted linear least squares tensor fit.

    Solves ln S = ln S0 - b g^T D g with weights equal to the squared
    signals; exact on noiseless forward-simulated data.

    Returns (D, S0) with D a 3x3 symmetric matrix.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape != (len(scheme),):
        raise ValidationError("signals length must match scheme")
    if np.any(signals <= 0):
        raise ValidationError("signals must be strictly positive")
    X = _design_matrix(scheme)
    if np.linalg.matrix_rank(X) < 7:
        raise DegenerateSchemeError(
            "gradient scheme cannot determine a tensor (rank < 7)"
        )
    w = signals ** 2
    y = np.log(signals)
    Xw = X * w[:, None]
    beta = np.linalg.solve(X.T @ Xw, Xw.T @ y)
    S0 = float(np.exp(beta[0]))
    dxx, dxy, dyy, dxz, dyz, dzz = beta[1:]
    D = np.array([
        [dxx, dxy, dxz],
        [dxy, dyy, dyz],
        [dxz, dyz, dzz],
    ])
    return D, S0


# ---------------------------------------------------------------------------
# symmetric 3x3 eigensystem
# ---------------------------------------------------------------------------

def eigenvalues_sym3(mats):
    """Analytic eigenvalues of symmetric 3x3 matrices, shape (..., 3, 3).

    Returns (..., 3) sorted descending. Uses the trigonometric solution of
    the characteristic polynomial, which is exact for symmetric input.
    """
    m = np.asarray(mats, dtype=np.float64)
    a00, a01, a02 = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    a11, a12, a22 = m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = (b00 ** 2 + b11 ** 2 + b22 ** 2
          + 2 * (a01 ** 2 + a02 ** 2 + a12 ** 2)) / 6.0
    p = np.sqrt(np.maximum(p2, 0.0))
    # det(B)/2 with B = (A - qI)
    detb = (b00 * (b11 * b22 - a12 * a12)
            - a01 * (a01 * b22 - a12 * a02)
            + a02 * (a01 * a12 - b11 * a02))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(p > 0, detb / (2 * p ** 3), 0.0)
    r = np.clip(r, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2 * p * np.cos(phi)
    l3 = q + 2 * p * np.cos(phi + 2 * np.pi / 3.0)
    l2 = 3 * q - l1 - l3
    return np.stack([l1, l2, l3], axis=-1)


def _jacobi_eigh(D, sweeps=30, tol=1e-14):
    """Cyclic Jacobi diagonalization of a symmetric 3x3 matrix."""
    a = np.array(D, dtype=np.float64)
    v = np.eye(3)
    for _ in range(sweeps):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= tol * max(1.0, np.abs(np.diag(a)).max()):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta ** 2 + 1))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t ** 2 + 1)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    lam = np.diag(a).copy()
    order = np.argsort(lam)[::-1]
    return lam[order], v[:, order]


def eigen_decompose(D):
    """Eigen-decomposition of a symmetric 3x3 tensor, descending eigenvalues.

    Fast analytic path with eigenvectors from matrix products; falls back to
    cyclic Jacobi iterations when eigenvalue gaps are too small for the
    analytic eigenvectors to be reliable.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (3, 3):
        raise ValidationError("tensor must be a 3x3 matrix")
    if not np.allclose(D, D.T, atol=1e-9 * max(1.0, np.abs(D).max())):
        raise ValidationError("tensor must be symmetric")
    lam = eigenvalues_sym3(D)
    scale = max(np.abs(lam).max(), 1e-300)
    gaps = np.array([lam[0] - lam[1], lam[1] - lam[2]])
    if gaps.min() < 1e-6 * scale:
        vals, vecs = _jacobi_eigh(D)
        return TensorEigen(vals, vecs)

    eye = np.eye(3)
    # (D - l2)(D - l3) projects onto the l1 eigenspace; pick its largest column
    p1 = (D - lam[1] * eye) @ (D - lam[2] * eye)
    v1 = p1[:, np.argmax(np.linalg.norm(p1, axis=0))]
    v1 = v1 / np.linalg.norm(v1)
    p3 = (D - lam[0] * eye) @ (D - lam[1] * eye)
    v3 = p3[:, np.argmax(np.linalg.norm(p3, axis=0))]
    v3 = v3 - (v3 @ v1) * v1
    v3 = v3 / np.linalg.norm(v3)
    v2 = np.cross(v3, v1)
    vecs = np.column_stack([v1, v2, v3])
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    return TensorEigen(lam, vecs)


# ---------------------------------------------------------------------------
# scalar maps
# ---------------------------------------------------------------------------

def _as_eigenvalues(eigen):
    if isinstance(eigen, TensorEigen):
        return np.asarray(eigen.eigenvalues, dtype=np.float64)
    return np.asarray(eigen, dtype=np.float64)


def fractional_anisotropy(eigen):
    """FA from eigenvalues; negative eigenvalues are clamped to zero first."""
    lam = np.maximum(_as_eigenvalues(eigen), 0.0)
    return float(_fa_from_lambdas(lam[None, :])[0])


def _fa_from_lambdas(lam):
    lam = np.maximum(lam, 0.0)
    mean = lam.mean(axis=-1, keepdims=True)
    num = np.sqrt(((lam - mean) ** 2).sum(axis=-1))
    den = np.sqrt((lam ** 2).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.sqrt(1.5) * np.where(den > 0, num / den, 0.0)
    return np.clip(fa, 0.0, 1.0)


def mean_diffusivity(eigen):
    return float(_as_eigenvalues(eigen).mean())


def fa_map(vol, mask=None):
    """Voxel-wise FA of a TensorVolume; zero outside an optional label mask."""
    if not isinstance(vol, TensorVolume):
        raise ValidationError("fa_map expects a TensorVolume")
    if mask is not None:
        if not isinstance(mask, LabelVolume) or mask.meta != vol.meta:
            raise ValidationError("mask must be a LabelVolume on the same grid")
    lam = eigenvalues_sym3(vol.matrices())
    fa = _fa_from_lambdas(lam)
    if mask is not None:
        fa = np.where(mask.data > 0, fa, 0.0)
    return ScalarVolume(vol.meta, fa)


def md_map(vol, mask=None):
    """Voxel-wise mean diffusivity of a TensorVolume."""
    if mask is not None and mask.meta != vol.meta:
        raise ValidationError("mask must be on the same grid")
    md = (vol.data[..., 0] + vol.data[..., 2] + vol.data[..., 5]) / 3.0
    if mask is not None:
        md = np.where(mask.data > 0, md, 0.0)
    return ScalarVolume(vol.meta, md)


def fit_tensor_map(signals, scheme, meta, min_signal=1e-12):
    """Vectorized WLLS tensor fit over a whole grid.

    signals: (nx, ny, nz, n_meas) array. Voxels containing any signal at or
    below ``min_signal`` are left as zero tensors (background). Returns
    (TensorVolume, S0 ScalarVolume).
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape != meta.dims + (len(scheme),):
        raise ValidationError("signal shape must be dims + (n_measurements,)")
    X = _design_matrix(scheme)
    if np.linalg.matrix_rank(X) < 7:
        raise DegenerateSchemeError(
            "gradient scheme cannot determine a tensor (rank < 7)"
        )
    flat = signals.reshape(-1, len(scheme))
    ok = np.all(flat > min_signal, axis=1)
    beta = np.zeros((flat.shape[0], 7))
    if ok.any():
        s = flat[ok]
        w = s ** 2
        y = np.log(s)
        # per-voxel normal equations with shared design matrix
        Xw = X[None] * w[:, :, None]
        lhs = np.einsum("mi,nmj->nij", X, Xw)
        rhs = np.einsum("nmi,nm->ni", Xw, y)
        beta[ok] = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    s0 = np.where(ok, np.exp(beta[:, 0]), 0.0).reshape(meta.dims)
    # canonical storage order (xx, xy, yy, xz, yz, zz)
    comps = beta[:, (1, 2, 3, 4, 5, 6)].reshape(meta.dims + (6,))
    return TensorVolume(meta, comps), ScalarVolume(meta, s0)
