"""Regenerate eigen8.json: random symmetric 8x8 matrices and their eigenvalues.

Eigenvalues are the roots of the characteristic polynomial, computed with
Faddeev-LeVerrier and mpmath.polyroots at 60 significant digits. Matrix
entries are stored as decimal strings so both sides see the same numbers.

    python tests/oracles/make_eigen_oracle.py
"""
import json
from pathlib import Path

import mpmath
import numpy as np

mpmath.mp.dps = 60


def charpoly_fl(a):
    """Coefficients c_0 = 1, c_1, ..., c_n of det(lambda I - A)."""
    n = a.rows
    eye = mpmath.eye(n)
    coeffs = [mpmath.mpf(1)]
    m = mpmath.zeros(n, n)
    for k in range(1, n + 1):
        m = a * m + coeffs[-1] * eye
        am = a * m
        coeffs.append(-sum(am[i, i] for i in range(n)) / k)
    return coeffs


def main():
    rng = np.random.default_rng(20241017)
    cases = []
    for _ in range(20):
        b = rng.uniform(-1.0, 1.0, size=(8, 8))
        sym = np.round((b + b.T) / 2.0, 6)
        entries = [[f"{v:.6f}" for v in row] for row in sym]
        a = mpmath.matrix([[mpmath.mpf(v) for v in row] for row in entries])
        roots = mpmath.polyroots(charpoly_fl(a), maxsteps=500, extraprec=400)
        vals = sorted(mpmath.re(r) for r in roots)
        assert max(abs(mpmath.im(r)) for r in roots) < mpmath.mpf("1e-30")
        cases.append({"matrix": entries, "eigenvalues": [mpmath.nstr(v, 30) for v in vals]})
    out = Path(__file__).with_name("eigen8.json")
    out.write_text(json.dumps(cases, indent=1) + "\n")
    print(f"wrote {len(cases)} cases to {out}")


if __name__ == "__main__":
    main()
