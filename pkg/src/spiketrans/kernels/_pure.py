"""Pure-numpy fallback for the spike attention-map kernels.

Same contract as the compiled core: all outputs are produced exclusively by
masked add/subtract passes (``np.add``/``np.subtract`` with ``where=``),
never by a general multiply.  Inputs are 3-D contiguous float32 arrays whose
leading axis is the flattened batch.
"""

import numpy as np


def binary_map(q, k):
    """q[B,N1,D], k[B,N2,D] in {0,1} -> q @ k^T accumulated by masked adds."""
    b, n1, d = q.shape
    n2 = k.shape[1]
    out = np.zeros((b, n1, n2), np.float32)
    for t in range(d):
        kc = k[:, None, :, t]
        np.add(out, kc, out=out, where=(q[:, :, t, None] == 1.0))
    return out


def ternary_map(q, k):
    """q[B,N1,D], k[B,N2,D] in {-1,0,1} -> signed accumulation of q @ k^T."""
    b, n1, d = q.shape
    n2 = k.shape[1]
    out = np.zeros((b, n1, n2), np.float32)
    for t in range(d):
        qc = q[:, :, t, None]
        kc = k[:, None, :, t]
        np.add(out, kc, out=out, where=(qc == 1.0))
        np.subtract(out, kc, out=out, where=(qc == -1.0))
    return out


def masked_value_sum(mask, v):
    """mask[B,N1,N2] in {0,1}, v[B,N2,Dv] -> per query, sum of gated v rows."""
    b, n1, n2 = mask.shape
    dv = v.shape[2]
    out = np.zeros((b, n1, dv), np.float32)
    for j in range(n2):
        vj = v[:, None, j, :]
        np.add(out, vj, out=out, where=(mask[:, :, j, None] == 1.0))
    return out


def weighted_value_sum(a, v):
    """a[B,N1,N2] integer-valued, v[B,N2,Dv] in {0,1} -> a @ v by gated adds."""
    b, n1, n2 = a.shape
    dv = v.shape[2]
    out = np.zeros((b, n1, dv), np.float32)
    for j in range(n2):
        aj = a[:, :, j, None]
        np.add(out, aj, out=out, where=(v[:, None, j, :] == 1.0))
    return out
