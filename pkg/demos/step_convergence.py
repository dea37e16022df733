"""How the stripping error depends on the source step h.

Feeds the sweep exact homogeneous data and the exact tail, so every error
left is discretization error of the sweep itself.  Prints the relative
error of ln u on the interior of the square for a few steps; it falls
roughly in proportion to h, which is why the default 6 mm step is coarse.
"""
import numpy as np

from dotrecon import stripping as S
from dotrecon.mesh import INTERIOR, OUTER, ScalarField, boundary_nodes, square_grid
from dotrecon.scenes import K2_BACKGROUND, OMEGA1_HALF_WIDTH
from dotrecon.specfun import bessel_k0

K = np.sqrt(K2_BACKGROUND)
m = square_grid(OMEGA1_HALF_WIDTH, 50)
bnd = boundary_nodes(m, OUTER)


def v(s):
    r = np.linalg.norm(m.nodes - [s, 0.0], axis=1)
    return np.log(bessel_k0(K * r) / (2 * np.pi)) / s ** 2


print(f"{'h [mm]':>7} {'ln u rel. error':>16}")
for h in (6.0, 2.0, 1.0, 0.5, 0.25):
    grid = S.SGrid(20.0, 8.0, h, int(round(12 / h)))
    state = S.StrippingState(m, ScalarField(m, v(grid.s_far)), [], grid.h)
    kn = grid.knots
    for n in range(1, grid.N + 1):
        psi = ((v(kn[n - 1]) - v(kn[n])) / h)[bnd]
        S.solve_qn(state, n, S.strip_coefficients(n, grid), psi)
    w = S.assemble_w(state, grid)
    ref = v(grid.s_near) * grid.s_near ** 2
    inner = m.tags == INTERIOR
    err = np.max(np.abs(grid.s_near ** 2 * w.values[inner] / ref[inner] - 1))
    print(f"{h:7.2f} {err:16.4f}")
