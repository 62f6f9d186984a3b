"""Two-link arm on the torus: E-SCP with and without explicit manifold rows.

On T^2 the trapezoid step of the joint-rotation field is a Cayley map, which
preserves each circle exactly, so both variants land on the manifold to
roundoff and reach the same cost up to the stopping tolerance.
"""

from escp.bench import bench
from escp.config import ProblemConfig, bundled_config_dir

cfg = ProblemConfig.load(bundled_config_dir() / "torus_suite.json")
res = bench([cfg], trials=6, seed=0, variants=["escp", "penalized_manifold"], workers=4)
for t in res.trials:
    print(f"trial {t.trial} {t.variant:>18}: {t.termination:<20} iters {t.scp_iterations:3d}  "
          f"cost {t.true_cost:.9f}  manifold {t.manifold_error:.1e}")
for r in res.summary:
    print(f"{r['variant']:>18}: success {r['successes']}/{r['trials']}, mean cost {r['mean_true_cost']:.9f}, "
          f"mean manifold error {r['mean_manifold_error']:.2e}")
