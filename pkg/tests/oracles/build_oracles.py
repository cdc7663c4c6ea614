"""Freeze exact reference values for the discrete-law tests.

Run from the repository root:  python3 tests/oracles/build_oracles.py

Everything here uses rational arithmetic (fractions + sympy) and none of the
package code, so the frozen numbers are an independent check.
"""
import json
import random
from fractions import Fraction
from pathlib import Path

import sympy

OUT = Path(__file__).with_name("laws.json")


def simplex(rng, m):
    w = [Fraction(rng.randint(1, 9)) for _ in range(m)]
    s = sum(w)
    return [v / s for v in w]


def build(rng, nu, nz, nw, nx):
    p_x = simplex(rng, nx)
    p_u = [simplex(rng, nu) for _ in range(nx)]
    p_az = [[simplex(rng, 2 * nz) for _ in range(nu)] for _ in range(nx)]
    p_w = [[simplex(rng, nw) for _ in range(nu)] for _ in range(nx)]
    ey = [[[Fraction(rng.randint(1, 19), 20) for _ in range(nu)] for _ in range(2)] for _ in range(nx)]
    latent = sum(p_x[x] * p_u[x][u] * (ey[x][1][u] - ey[x][0][u]) for x in range(nx) for u in range(nu))
    # observed conditionals, then the bridge functional with exact solves
    ident = Fraction(0)
    for x in range(nx):
        p_w_x = [sum(p_u[x][u] * p_w[x][u][w] for u in range(nu)) for w in range(nw)]
        for a in (0, 1):
            pwz = sympy.zeros(nw, nz)
            eyz = sympy.zeros(1, nz)
            for z in range(nz):
                mass = sum(p_u[x][u] * p_az[x][u][a * nz + z] for u in range(nu))
                for w in range(nw):
                    num = sum(p_u[x][u] * p_az[x][u][a * nz + z] * p_w[x][u][w] for u in range(nu))
                    pwz[w, z] = sympy.Rational(num / mass)
                ynum = sum(p_u[x][u] * p_az[x][u][a * nz + z] * ey[x][a][u] for u in range(nu))
                eyz[0, z] = sympy.Rational(ynum / mass)
            full = nw == nz and pwz.rank() == nz
            h = eyz * pwz.inv() if full else eyz * pwz.pinv()
            assert h * pwz == eyz, "bridge equation has no exact solution"
            val = sum(h[0, w] * sympy.Rational(p_w_x[w]) for w in range(nw))
            ident += (1 if a else -1) * Fraction(str(val)) * p_x[x]
    assert ident == latent, (ident, latent)
    as_float = lambda v: [as_float(e) for e in v] if isinstance(v, list) else float(v)  # noqa: E731
    p_az_tab = [[[row[:nz], row[nz:]] for row in pu] for pu in p_az]
    return {
        "sizes": {"u": nu, "z": nz, "w": nw, "x": nx},
        "law": {"schema": "negctrl-law/1", "p_x": as_float(p_x), "p_u_given_x": as_float(p_u),
                "p_az_given_ux": as_float(p_az_tab), "ey_given_aux": as_float(ey),
                "p_w_given_ux": as_float(p_w)},
        "latent_ate": str(latent),
        "latent_ate_float": float(latent),
    }


def main():
    rng = random.Random(20240601)
    cases = [build(rng, k, k, k, 2) for k in (2, 2, 3, 3, 4)]
    cases += [build(rng, 2, 3, 3, 2), build(rng, 2, 4, 3, 1), build(rng, 1, 2, 2, 2)]
    OUT.write_text(json.dumps(cases, indent=1) + "\n")
    print(f"wrote {len(cases)} laws to {OUT}")


if __name__ == "__main__":
    main()
