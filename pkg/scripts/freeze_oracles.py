"""Independent oracle values used as frozen literals in the test suite.

None of these go through the package: finite differences, brute-force
coupling enumeration, plain quadrature and long partial sums.
Run: python3 scripts/freeze_oracles.py
"""
import itertools
import json
import math

import numpy as np
from scipy import integrate
from scipy.linalg import eigh_tridiagonal


def fd_dirichlet(L, n=10_000, k=6):
    """Lowest eigenvalues of -d^2/dx^2 on (0, L) by second-order finite differences."""
    h = L / (n + 1)
    lam = eigh_tridiagonal(np.full(n, 2.0 / h**2), np.full(n - 1, -1.0 / h**2),
                           select="i", select_range=(0, k - 1), eigvals_only=True)
    # Richardson with a half-resolution solve removes the O(h^2) error.
    h2 = L / (n // 2 + 1)
    lam2 = eigh_tridiagonal(np.full(n // 2, 2.0 / h2**2), np.full(n // 2 - 1, -1.0 / h2**2),
                            select="i", select_range=(0, k - 1), eigvals_only=True)
    return lam + (lam - lam2) * h**2 / (h2**2 - h**2)


def brute_w(xa, wa, xb, wb, q):
    """Optimal cost for 2x2 transport by scanning the one free coupling parameter."""
    lo, hi = max(0.0, wa[0] - wb[1]), min(wa[0], wb[0])
    best = math.inf
    for p in np.linspace(lo, hi, 200_001):
        plan = [[p, wa[0] - p], [wb[0] - p, wa[1] - wb[0] + p]]
        c = sum(plan[i][j] * abs(xa[i] - xb[j]) ** q for i in range(2) for j in range(2))
        best = min(best, c)
    return best


def main():
    out = {}
    out["fd_interval_pi"] = fd_dirichlet(math.pi).tolist()
    out["fd_interval_2"] = fd_dirichlet(2.0).tolist()
    # phi_0 normalization in L^2(mu), mu uniform probability on [0, pi]
    out["phi0_norm"] = integrate.quad(lambda x: 2 * math.sin(x) ** 2 / math.pi, 0, math.pi)[0]
    z = integrate.quad(lambda x: math.sin(x) ** 2, 0, math.pi)[0]
    out["qsd_density_mid"] = 1.0 / z
    m = np.arange(1, 10**6 + 1, dtype=float)
    out["limit_sum_1e6"] = float(np.sum(2.0 / (m * (m + 2)) ** 2))
    mu_phi0 = integrate.quad(lambda x: math.sqrt(2) * math.sin(x) / math.pi, 0, math.pi)[0]
    mu0_phi0 = integrate.quad(lambda x: (math.sqrt(2) * math.sin(x)) ** 3 / math.pi, 0, math.pi)[0]
    out["asymptote_qsd"] = mu_phi0 * mu0_phi0
    # W_2^2 of a point mass against mu_0 on [0, pi]
    out["w2sq_point_1"] = integrate.quad(lambda y: (1.0 - y) ** 2 * 2 / math.pi * math.sin(y) ** 2, 0, math.pi)[0]
    # 2-atom couplings
    xa, wa, xb, wb = [0.0, 1.0], [0.3, 0.7], [0.2, 2.0], [0.6, 0.4]
    out["brute_q2"] = brute_w(xa, wa, xb, wb, 2.0)
    xa, wa, xb, wb = [0.0, 1.0], [0.5, 0.5], [0.9, 1.9], [0.5, 0.5]
    out["brute_q05"] = brute_w(xa, wa, xb, wb, 0.5)
    out["monotone_q05"] = 0.5 * 0.9**0.5 + 0.5 * 0.9**0.5
    # log(1+lam)/lam^0.5 at the end of the probe grid
    out["log_ratio_1e8"] = math.log1p(1e8) / 1e4
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
