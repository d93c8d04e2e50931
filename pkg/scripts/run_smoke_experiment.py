#!/usr/bin/env python3
"""Small end-to-end run on the scalar linear-Gaussian model.

Simulates data, runs the kernel-learning filter next to the exact recursion
and a plain particle filter, and leaves all artifacts under out/smoke/.
"""

import sys

from fbsdefilter.harness import (
    ExperimentConfig,
    FilterSettings,
    GridSettings,
    run_experiment,
)


def main() -> int:
    cfg = ExperimentConfig(
        model="linear1d",
        seed=7,
        out_dir="out/smoke",
        grid=GridSettings(horizon=1.0, steps=10),
        filter=FilterSettings(n_particles=400, mc_samples=32, n_kernels=24,
                              sgd_steps=2000),
        replications=4,
        threads=4,
    )
    artifacts = run_experiment(cfg)
    print(f"artifacts under {artifacts.out_dir}")
    print(f"per-step summary: {artifacts.summary_path}")
    if artifacts.error_path is not None:
        print(f"error table vs exact recursion: {artifacts.error_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
