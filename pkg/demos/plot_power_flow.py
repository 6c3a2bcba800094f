"""
AC and DC power flow on the 30-bus case
=======================================

Solve the stored 30-bus operating point both ways and compare the
active power crossing each transmission section.
"""

import numpy as np

from powerformer import builtin_case, builtin_sections, section_flow, solve_ac, solve_dc

case = builtin_case("case30")
sections = builtin_sections(case, "case30")

ac = solve_ac(case)
print(f"AC converged in {ac.iterations} iterations, max mismatch {ac.max_mismatch:.2e} p.u.")

# the DC model drops losses and reactive power, so expect a few percent of drift
dc = solve_dc(case)
for s in sections:
    fa, fd = section_flow(ac, s), section_flow(dc, s)
    print(f"section {s.id}: AC {fa.p:8.2f} MW  DC {fd.p:8.2f} MW  "
          f"bounds [{s.p_min}, {s.p_max}]  secure={fa.within_p_bounds}")

# voltage profile
print("lowest voltage", np.round(ac.vm.min(), 4), "p.u. at bus", int(case.bus_id[np.argmin(ac.vm)]))
