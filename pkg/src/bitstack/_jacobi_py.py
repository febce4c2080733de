"""Pure-numpy fallback for the compiled Jacobi sweep kernel.

Same contract and pair order as ``_jacobi.pyx``. Dot products go through
numpy, so results agree with the compiled kernel to rounding, not bit-for-bit.
"""

from __future__ import annotations

import math

import numpy as np


def jacobi_sweeps(cols: np.ndarray, vcols: np.ndarray, tol: float, max_sweeps: int, floor: float = 0.0):
    d = cols.shape[0]
    sweep = 0
    rotated = True
    off = 0.0
    while rotated and sweep < max_sweeps:
        rotated = False
        off = 0.0
        sweep += 1
        for p in range(d - 1):
            cp = cols[p]
            vp = vcols[p]
            for q in range(p + 1, d):
                cq = cols[q]
                alpha = float(cp @ cp)
                beta = float(cq @ cq)
                gamma = float(cp @ cq)
                if gamma == 0.0 or alpha <= floor or beta <= floor:
                    continue
                rel = abs(gamma) / math.sqrt(alpha * beta)
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                cq[:] = s * cp + c * cq
                cp[:] = new_p
                vq = vcols[q]
                new_vp = c * vp - s * vq
                vq[:] = s * vp + c * vq
                vp[:] = new_vp
    return sweep, not rotated, off
