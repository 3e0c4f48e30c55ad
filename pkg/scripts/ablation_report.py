"""Print PSNR gain and rate ratio of each cached ablation pair.

    python3 scripts/ablation_report.py [flow distill cond]
"""

import sys

from ditic import protocol


def main():
    suites = sys.argv[1:] or ["flow", "distill", "cond"]
    for suite in suites:
        for seed, (ref, abl) in zip(protocol.ABLATION_SEEDS, protocol.ablation_runs(suite)):
            er, ea = ref.eval(), abl.eval()
            ratio = ea.bpp / er.bpp
            print(f"{suite:8s} seed {seed}: ref {er.bpp:.4f} bpp {er.psnr:.3f} dB | "
                  f"ablated {ea.bpp:.4f} bpp {ea.psnr:.3f} dB | gain {er.psnr - ea.psnr:+.3f} dB, "
                  f"rate ratio {ratio:.3f}{'' if abs(ratio - 1) <= 0.05 else ' (unmatched)'}")


if __name__ == "__main__":
    main()
