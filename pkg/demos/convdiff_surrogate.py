"""Train a convection-diffusion surrogate on the FEM residual and compare it
with direct solves on four reference parameter sets.

    python3 demos/convdiff_surrogate.py [epochs]
"""

import sys

import numpy as np

from femnn.hybrid_forward import ForwardTrainConfig, predict_with_residual, train_forward
from femnn.linalg import lu_solve
from femnn.problems import make_family

CASES = {
    "a": [100, 20, 10, 20] + [100] * 6,
    "b": [25, 35, 10, 3] + [1] * 6,
    "c": [65, 178, 6, 11, 5, 2, 3, 4, 5, 1],
    "d": [0, 200, 10, 30, 5, 2, 3, 4, 5, 1],
}


def main(epochs=2000):
    family = make_family("convdiff")
    cfg = ForwardTrainConfig(**family.train_defaults | {"epochs": epochs}, seed=0)

    def progress(epoch, model):
        if epoch % max(1, epochs // 10) == 0:
            print(f"epoch {epoch:5d}")

    model, history = train_forward(family.sampler, family.build_model(seed=0), cfg, progress)
    print(f"final mean residual norm {history.mean_loss[-1]:.3g}\n")

    for name, x in CASES.items():
        x = np.array(x, dtype=float)
        system = family.assemble(x)
        u, report = predict_with_residual(model, x, system)
        exact = lu_solve(system.K, system.F)
        print(f"case {name}: surrogate {np.round(system.expand(u), 2)}")
        print(f"        FEM       {np.round(system.expand(exact), 2)}")
        print(f"        mean abs error {np.mean(np.abs(u - exact)):.3f}, relative residual {report.relative_residual:.2e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2000)
