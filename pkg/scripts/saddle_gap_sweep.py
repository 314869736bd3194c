"""Saddle gap of the robust filter over a range of ambiguity bounds."""
import argparse

from robustkb.gexp import concave_dual, parse_generator
from robustkb.model import TimeGrid, scalar_model
from robustkb.robust import RobustProblem, certify_saddle


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--generator", default="hyperbolic:1")
    ap.add_argument("--mu", type=float, nargs="+", default=[0.5, 0.3, 0.1, 0.03, 0.0])
    ap.add_argument("--steps", type=int, nargs="+", default=[500, 1000])
    ap.add_argument("--t-star", type=float, default=1.0)
    args = ap.parse_args()
    G = concave_dual(parse_generator(args.generator))
    print("N,mu,lower,upper,gap")
    for N in args.steps:
        grid = TimeGrid(1.0, N)
        model = scalar_model(grid)
        for mu in args.mu:
            rep = certify_saddle(RobustProblem(model, grid, G, mu, args.t_star))
            print(f"{N},{mu:g},{rep.lower_value:.10f},{rep.upper_value:.10f},{rep.gap:.3e}")


if __name__ == "__main__":
    main()
