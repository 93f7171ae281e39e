"""Pure-numpy implementations of the elementwise network kernels.

These are the reference versions; ``ratioflow._kernels`` (Cython) agrees with
them to within a few ulp of 1 on finite inputs.
"""

import numpy as np

# Canonical SELU constants (Klambauer et al.), to full double precision.
SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
_LA = SELU_LAMBDA * SELU_ALPHA


def selu(z):
    z = np.asarray(z, dtype=np.float64)
    neg = _LA * np.expm1(np.minimum(z, 0.0))
    return np.where(z > 0.0, SELU_LAMBDA * z, neg)


def selu_with_grad(z):
    """Return ``(selu(z), selu'(z))`` computed from a single ``expm1``."""
    z = np.asarray(z, dtype=np.float64)
    em1 = np.expm1(np.minimum(z, 0.0))
    pos = z > 0.0
    out = np.where(pos, SELU_LAMBDA * z, _LA * em1)
    grad = np.where(pos, SELU_LAMBDA, _LA * (em1 + 1.0))
    return out, grad


def selu_jvp(z, dz):
    """``(selu(z), dz * selu'(z))`` with ``dz`` of shape ``z.shape[:-1] + (k, w)``.

    ``dz`` is overwritten.
    """
    out, grad = selu_with_grad(z)
    dz *= grad[..., None, :]
    return out, dz
