"""Smoke test of the Python bindings.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python3 python/smoke_test.py
"""

import math
import random

import heterodyn_py as h


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print("ok  ", msg)


def main():
    cfg = h.ModelConfig.reference()
    checks = cfg.validate()
    check(all(passed for _, passed, _ in checks), "reference config passes every check")
    xc = cfg.critical_point
    check(all(cfg.t(x) <= cfg.t(xc) + 1e-12 for x in (0.1, 0.3, 0.6, 0.9)), "map peaks at its critical point")
    again = h.ModelConfig.from_string(cfg.to_string())
    check(again.config_hash() == cfg.config_hash(), "config text round-trips")

    try:
        h.ModelConfig.from_string("bogus = 1\n")
    except ValueError:
        check(True, "malformed config raises ValueError")
    else:
        check(False, "malformed config raises ValueError")

    a = h.simulate(cfg, 2000, seed=7)
    b = h.simulate(cfg, 2000, seed=7)
    check(len(a) == 2000 and a.x == b.x and a.z == b.z, "simulation is deterministic per seed")
    bound = 0.01 * 0.1
    check(all(abs(z - x) <= bound for x, z in zip(a.x, a.z)), "observation error stays in its band")

    kernel = h.build_ulam(cfg, 256)
    row = sum(kernel.entry(10, j) for j in range(kernel.n))
    check(abs(row - 1.0) < 1e-10, "Ulam rows are probability vectors")
    stat, second = kernel.stationary()
    check(abs(stat.mass() - 1.0) < 1e-10 and 0.0 < second < 1.0, "stationary density and spectral gap")

    lo, hi = stat.bounds
    flat = h.GridDensity.uniform(lo, hi, stat.n_cells)
    f = h.Filter(cfg, kernel, flat)
    for z in a.z[:200]:
        f.update(z)
    check(f.step == 200 and abs(f.density.mass() - 1.0) < 1e-10, "filter stays normalized")
    err = abs(f.density.mean() - a.x[199])
    check(err < 0.01, f"filter mean tracks the state (error {err:.2e})")

    g1 = h.GridDensity(0.0, 1.0, [1.0, 2.0])
    g2 = h.GridDensity(0.0, 1.0, [2.0, 1.0])
    check(abs(h.hilbert_distance(g1, g2) - math.log(4.0)) < 1e-12, "Hilbert distance of (1,2) and (2,1)")
    check(h.kantorovich(g1, g1) == 0.0, "Kantorovich distance vanishes on the diagonal")

    rng = random.Random(3)
    gumbel = [3.0 - math.log(-math.log(rng.random())) for _ in range(5000)]
    fit = h.gev_fit(gumbel)
    check(abs(fit["kappa"] - 3.0) < 0.1 and abs(fit["sigma"] - 1.0) < 0.1, "GEV fit recovers Gumbel(3, 1)")
    check(h.block_maxima(list(range(1, 13)), 3) == [4.0, 8.0, 12.0], "block maxima by hand")

    rows = h.gumbel_check(cfg, [0.0, 1.0], 500, 400, seed=1, n_cells=256)
    check(rows[0]["w_hat"] == 1.0, "empty ball is never hit")
    lo_ci, hi_ci = rows[1]["ci"]
    check(lo_ci <= math.exp(-1.0) <= hi_ci, "P(M_t < u_t) matches exp(-1)")

    try:
        h.simulate(cfg, 0)
    except ValueError:
        check(True, "zero-length simulation raises ValueError")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
