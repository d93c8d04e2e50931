#!/usr/bin/env python3
"""Run all four convergence-rate studies and print fitted vs expected slopes.

Writes each report (JSON plus raw replication CSV) under out/rates/.
"""

import sys

from fbsdefilter.harness import (
    denominator_rate_study,
    dt_rate_study,
    kde_rate_study,
    prediction_rate_study,
    save_report,
)


def main() -> int:
    out = "out/rates"
    studies = [
        ("kernel count (density estimator)", kde_rate_study(replications=200, seed=1)),
        ("reverse-sample count (prediction)", prediction_rate_study(replications=200, seed=2)),
        ("particle count (normalizer)", denominator_rate_study(replications=200, seed=3)),
        ("step size (strong path error)", dt_rate_study(replications=2000, seed=4)),
    ]
    for label, report in studies:
        save_report(report, out)
        print(f"{label:38s} axis={report.axis:2s} slope {report.slope:+.3f} "
              f"(+- {report.slope_half_width:.3f}) target {report.theory_slope:+.3f}")
        if report.notes:
            print(f"{'':38s} note: {report.notes}")
    print(f"reports under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
