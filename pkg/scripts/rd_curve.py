"""Write the RD CSV of the cached IBP sweep (trains it first if needed).

    python3 scripts/rd_curve.py runs/ibp_rd.csv
"""

import sys
from pathlib import Path

from ditic import protocol
from ditic.harness import rd_sweep


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/ibp_rd.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    runs = protocol.ibp_sweep()
    curves = rd_sweep({lam: r.path for lam, r in runs.items()}, protocol.heldout_images(), out,
                      method="ditic-toy")
    for p in curves["ditic-toy"].points:
        print(f"bpp {p.bpp:.4f}  psnr {p.quality:.3f}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
