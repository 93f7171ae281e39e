"""Compare the compiled and pure-Python kernel backends.

Times the elementwise SELU forward-mode kernel and one S1 ratio solve with an
untrained default-size model.  Each backend runs in its own interpreter
because the backend is fixed at import time.

    python benchmarks/bench_kernels.py [--repeats 5] [--points 1000]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, timeit
import numpy as np
from ratioflow import kernels
from ratioflow.flow_model import ConditionSpec, FlowScoreModel, model_field_provider
from ratioflow.ratio import SolverConfig, estimate_log_ratio
from ratioflow.schedules import Schedule

repeats, n_points = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
z = rng.standard_normal((n_points, 256))
dz = rng.standard_normal((n_points, 2, 256))
jvp = min(timeit.repeat(lambda: kernels.selu_jvp(z, dz), number=20, repeat=repeats)) / 20

model = FlowScoreModel.create(2, ConditionSpec((("label", 2),)), Schedule("II", 0.1), rng=0)
num, den = model_field_provider(model, (1,)), model_field_provider(model, (0,))
x = rng.standard_normal((n_points, 2))
solver = SolverConfig("rk4", 20)
solve = min(timeit.repeat(lambda: estimate_log_ratio(x, num, den, solver=solver),
                          number=1, repeat=repeats))
print(json.dumps({"backend": kernels.BACKEND, "selu_jvp_s": jvp, "s1_20_steps_s": solve}))
"""


def run(pure: bool, repeats: int, points: int) -> dict:
    env = dict(os.environ)
    env.pop("RATIOFLOW_PURE_PYTHON", None)
    if pure:
        env["RATIOFLOW_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", CHILD, str(repeats), str(points)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--points", type=int, default=1000)
    args = parser.parse_args(argv)
    compiled = run(False, args.repeats, args.points)
    python = run(True, args.repeats, args.points)
    if compiled["backend"] != "cython":
        print("compiled extension not built; only the fallback is available")
    print(f"{'':16s}{'selu_jvp (ms)':>16s}{'S1 solve (s)':>16s}")
    for row in (compiled, python):
        print(f"{row['backend']:16s}{1e3 * row['selu_jvp_s']:16.3f}{row['s1_20_steps_s']:16.3f}")
    print(f"{'speed-up':16s}{python['selu_jvp_s'] / compiled['selu_jvp_s']:16.2f}"
          f"{python['s1_20_steps_s'] / compiled['s1_20_steps_s']:16.2f}")


if __name__ == "__main__":
    main()
