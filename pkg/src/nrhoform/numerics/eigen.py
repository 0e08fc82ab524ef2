"""Dense real eigendecomposition ordered by closeness to the unit circle.

The monodromy-mode extraction downstream wants the most central mode
first, so eigenpairs are sorted by |log|lambda|| ascending.  Conjugate
pairs are kept adjacent with the positive-imaginary member first for
deterministic downstream selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EigenError(RuntimeError):
    """Eigendecomposition failed to converge."""


@dataclass
class EigenDecomposition:
    """Eigenvalues/vectors of a real matrix plus its SVD condition number.

    ``eigenvectors`` columns are unit 2-norm and ``eigenvectors[:, k]``
    pairs with ``eigenvalues[k]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    condition_number: float

    def residual(self, a: np.ndarray) -> float:
        """max_k ||A v_k - lambda_k v_k||, for verification."""
        r = a @ self.eigenvectors - self.eigenvectors * self.eigenvalues
        return float(np.max(np.linalg.norm(r, axis=0)))


def _centrality(lam: np.ndarray) -> np.ndarray:
    mag = np.abs(lam)
    with np.errstate(divide="ignore"):
        c = np.abs(np.log(mag))
    c[mag == 0.0] = np.inf
    return c


def eig(a: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a real square matrix, most central mode first."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    try:
        lam, vec = np.linalg.eig(a)
    except np.linalg.LinAlgError as exc:
        raise EigenError(f"eigendecomposition did not converge: {exc}") from exc

    norms = np.linalg.norm(vec, axis=0)
    vec = vec / norms

    # Sort by centrality; break ties deterministically keeping conjugate
    # pairs adjacent (positive imaginary part first).
    order = np.lexsort((-lam.imag, lam.real, np.round(_centrality(lam), 12)))
    lam = lam[order]
    vec = vec[:, order]

    sv = np.linalg.svd(a, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf

    dec = EigenDecomposition(eigenvalues=lam, eigenvectors=vec, condition_number=cond)
    scale = np.linalg.norm(a)
    if scale > 0 and dec.residual(a) > 1e-8 * scale:
        raise EigenError("eigenpair residual exceeds tolerance")
    return dec
