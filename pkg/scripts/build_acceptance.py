"""Train (or reuse from cache) every artifact the acceptance suite evaluates.

    python3 scripts/build_acceptance.py [stage1|ibp|flow|distill|cond|detach|all]
"""

import argparse
import logging
import time

from ditic import protocol


def main():
    p = argparse.ArgumentParser()
    p.add_argument("targets", nargs="*", default=["all"])
    p.add_argument("--root", help="cache directory (default .cache/acceptance)")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    t0 = time.time()
    for t in a.targets:
        if t == "stage1":
            r = protocol.stage1(a.root)
            print(t, r.path, r.eval())
        elif t == "ibp":
            for lam, r in protocol.ibp_sweep(a.root).items():
                e = r.eval()
                print(f"lambda {lam:g}: bpp {e.bpp:.4f} psnr {e.psnr:.3f}", flush=True)
        elif t in ("flow", "distill", "cond"):
            for ref, abl in protocol.ablation_runs(t, root=a.root):
                er, ea = ref.eval(), abl.eval()
                print(f"{t} {abl.name}: ref {er.bpp:.4f}/{er.psnr:.3f} "
                      f"abl {ea.bpp:.4f}/{ea.psnr:.3f}", flush=True)
        elif t == "detach":
            base, blocked = protocol.gradient_block_runs(a.root)
            eb, ed = base.eval(), blocked.eval()
            print(f"detach: base {eb.bpp:.4f}/{eb.psnr:.3f} blocked {ed.bpp:.4f}/{ed.psnr:.3f}")
        elif t == "all":
            protocol.build_all(a.root)
        else:
            p.error(f"unknown target {t}")
    print(f"done in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
