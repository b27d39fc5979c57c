"""How leak rate and spectral radius shape the reservoir's memory.

Drives one reservoir with a single impulse and tracks how long the state
remembers it, then checks the zero-input contraction bound
``alpha + (1 - alpha) * rho * s_max`` against the observed decay.

    python demos/02_reservoir_memory.py
"""

import numpy as np

from esn_intraday.reservoir import ReservoirSpec, contraction_rate, run_state_sequence, sample_weights

T = 60
impulse = np.zeros((T, 6))
impulse[0] = 1.0

print(f"{'alpha':>5} {'rho':>4} {'bound':>7} {'half-life':>10} {'|X_60|/|X_1|':>13}")
for alpha in (0.0, 0.5, 0.9):
    for rho in (0.0, 0.6):
        spec = ReservoirSpec(alpha=alpha, rho=rho, gamma=0.5, seed=0)
        w = sample_weights(spec)
        states, _ = run_state_sequence(w, spec, impulse)
        norms = np.linalg.norm(states, axis=1)
        below = np.flatnonzero(norms < 0.5 * norms[0])
        half = int(below[0]) if below.size else T
        print(f"{alpha:5.1f} {rho:4.1f} {contraction_rate(w, spec):7.3f} {half:10d} {norms[-1] / norms[0]:13.2e}")

# missing inputs: the state decays toward zero instead of being reset
spec = ReservoirSpec(alpha=0.5, rho=0.6, gamma=0.5, seed=0)
z = np.random.default_rng(0).standard_normal((20, 6))
z[8:14] = np.nan
states, valid = run_state_sequence(sample_weights(spec), spec, z)
print("\nstate norm through a 6-step gap (x = flagged invalid, never used for training):")
print(" ".join(f"{n:.2f}{'' if v else 'x'}" for n, v in zip(np.linalg.norm(states, axis=1), valid)))
