"""Sampler and likelihood behaviour on an analytic Gaussian denoiser.

Prints three tables: the exact 31-NFE Heun variance bias for several data
variances, NLL versus NFE, and round-trip error versus backward NFE.
"""
import argparse
import math

import torch

from groupdiff.diffusion import GaussianOracle
from groupdiff.likelihood import NLLConfig, nll, round_trip_error
from groupdiff.sampler import build_schedule, heun_solve, likelihood_schedule


def variance_bias(var, steps):
    s = build_schedule(steps)
    slope = heun_solve(GaussianOracle(0.0, var), torch.ones(1, 1, dtype=torch.float64), s.levels).item()
    return slope**2 * s.levels[0] ** 2 / var - 1


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--dim", type=int, default=64)
    args = p.parse_args()

    print("variance bias of Heun generation (relative)")
    print("var     " + "  ".join(f"NFE {2 * n - 1:>4}" for n in (8, 16, 32, 64)))
    for var in (0.01, 0.25, 1.0, 4.0, 25.0):
        print(f"{var:<7} " + "  ".join(f"{variance_bias(var, n):+9.4f}" for n in (8, 16, 32, 64)))

    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(args.samples, 1, args.dim, generator=g, dtype=torch.float64)
    vl = [1] * args.samples
    oracle = GaussianOracle(0.0, 1.0)
    print(f"\nper-dim NLL (target {0.5 * math.log(2 * math.pi * math.e):.4f})")
    for nfe in (16, 32, 64, 128, 256):
        res = nll(oracle, x0, vl, NLLConfig(nfe=nfe))
        print(f"NFE {nfe:>4}: {float(res.nll_per_dim.mean()):.4f}")

    print("\nround-trip error, forward NFE 128")
    fwd = likelihood_schedule(128)
    for nfe in (16, 32, 64, 128, 256):
        mae, _, _ = round_trip_error(oracle, x0, vl, fwd, likelihood_schedule(nfe))
        print(f"backward NFE {nfe:>4}: {float(mae.mean()):.3e}")


if __name__ == "__main__":
    main()
