"""Solve the four formulations on the reservoir instance and check the value chain.

Run with ``python demos/reservoir_chain.py [saa_samples]``; takes a few minutes.
"""

import sys
import time

from dynchance.gaussian import GaussianSpec
from dynchance.instances import reservoir_model, reservoir_stages
from dynchance.problems import build_problem, value_chain_check
from dynchance.solver import SolverOptions
from dynchance.timeseries import compact_form, decompose_coefficients


def main(saa_n=200_000):
    model, stage = reservoir_model(), reservoir_stages()
    cf = compact_form(decompose_coefficients(model), model)
    spec = GaussianSpec(cf.Sigma)
    reports, instances = {}, {}
    warm = {"P3": ["P1", "P2"], "P4": ["P3"]}
    for kind in ("P1", "P2", "P3", "P4"):
        t0 = time.perf_counter()
        inst = build_problem(kind, stage, cf, spec, seed=0)
        rep = inst.solve(SolverOptions(starts=3), warm_starts=[reports[k].x for k in warm.get(kind, [])])
        reports[kind], instances[kind] = rep, inst
        print(f"{kind}: objective {rep.objective:+.6f}  probability {rep.probability:.4f}  "
              f"{rep.message}  ({time.perf_counter() - t0:.1f} s)")
        rule = inst.rule(rep.x)
        for t, (F, f) in enumerate(zip(rule.F, rule.f)):
            print(f"    stage {t + 1}: F = {F.round(4).tolist()}  f = {f.round(4).tolist()}")
    verdict = value_chain_check(reports, instances=instances, saa_n=saa_n)
    print(verdict.summary())
    return 0 if verdict.ok else 1


if __name__ == "__main__":
    sys.exit(main(int(sys.argv[1]) if len(sys.argv) > 1 else 200_000))
