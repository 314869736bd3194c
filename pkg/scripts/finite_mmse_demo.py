"""Conditional MMSE on random finite instances: solver against grid search."""
import argparse

import numpy as np

from robustkb.finite import (brute_force_mmse, check_stability, conditional_mmse, random_instance,
                             saddle_check)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print("size,densities,blocks,value,brute_value,eta_dist,brute_spacing,saddle,stable")
    for _ in range(args.instances):
        op, C, xi = random_instance(rng)
        r = conditional_mmse(op, xi, C)
        bf = brute_force_mmse(op, xi, C)
        sv = saddle_check(op, xi, C, r).max_violation
        print(f"{op.space.size},{op.n_densities},{C.n_blocks},{r.value:.8f},{bf.value:.8f},"
              f"{np.max(np.abs(r.eta_hat - bf.eta)):.2e},{bf.resolution:.2e},{sv:.1e},"
              f"{check_stability(op, C).stable}")


if __name__ == "__main__":
    main()
