"""Recover a speed-dependent bearing stiffness law from rotor responses.

Responses are synthesised from a known linear law, optionally with noise,
and a speed-to-stiffness network is fitted to the split-system residual.

    python3 demos/bearing_identification.py [noise]
"""

import sys

import numpy as np

from femnn.fem import load_rotor_model
from femnn.hybrid_inverse import (BearingParametrization, InverseTrainConfig, LinearBearingLaw,
                                  generate_synthetic_observations, predict_coefficients, train_inverse)


def main(noise=0.0):
    rotor = load_rotor_model()
    law = LinearBearingLaw()
    param = BearingParametrization()
    speeds = np.linspace(50.0, 500.0, 40)
    obs = generate_synthetic_observations(rotor, law, speeds, param, noise=noise, seed=0)
    model, history = train_inverse(obs, rotor, param, InverseTrainConfig())
    print(f"final normalised residual {history.mean_loss[-1]:.2e}")
    print(" omega    k_xx fit     k_xx true    k_yy fit     k_yy true")
    for omega, c in zip(speeds[::5], predict_coefficients(model, speeds[::5])):
        t = law.coeffs(omega)
        print(f"{omega:6.1f}  {c[0]:.5e}  {t[0]:.5e}  {c[1]:.5e}  {t[1]:.5e}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 0.0)
