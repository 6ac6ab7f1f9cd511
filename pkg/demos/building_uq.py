"""Monte Carlo of the building's top displacement under random wind, with the
FEM solver and with a residual-trained surrogate (plus fallback refinement).

    python3 demos/building_uq.py [epochs] [samples]
"""

import sys

from femnn.hybrid_forward import ForwardTrainConfig, train_forward
from femnn.problems import make_family
from femnn.uq import run_monte_carlo, summarize


def show(label, result):
    s = summarize(result.outputs)
    print(f"{label:>22}: mean {s.mean:.4f} m, std {s.std:.4f}, skewness {s.skewness:.3f}, "
          f"kurtosis {s.kurtosis:.3f}, refined {result.n_refined}")


def main(epochs=1500, n=5000):
    family = make_family("building_beam")
    cfg = ForwardTrainConfig(**family.train_defaults | {"epochs": epochs}, seed=0)
    model, _ = train_forward(family.sampler, family.build_model(seed=0), cfg)
    for label, specs in (("trained inputs", None), ("shifted inputs", family.shifted_inputs)):
        print(label)
        show("FEM", run_monte_carlo(family, "fem", n, seed=0, specs=specs))
        show("surrogate + fallback", run_monte_carlo(family, "surrogate-fallback", n, seed=0, model=model,
                                                     specs=specs))


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
