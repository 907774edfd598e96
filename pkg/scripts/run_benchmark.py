"""Run the noise-robustness benchmark and print the result table.

    python scripts/run_benchmark.py --out results/bench.csv
"""
import argparse
import time
from dataclasses import dataclass

from shadowlight.synthbench import BenchConfig, run_benchmark


@dataclass
class RunConfig:
    out: str = "bench.csv"
    workers: int = 1
    config: str | None = None      # optional JSON benchmark config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=RunConfig.out)
    ap.add_argument("--workers", type=int, default=RunConfig.workers)
    ap.add_argument("--config", default=None)
    rc = RunConfig(**vars(ap.parse_args()))

    cfg = BenchConfig.load(rc.config) if rc.config else BenchConfig()
    t0 = time.perf_counter()

    def show(recs):
        r = recs[0]
        errs = ", ".join(f"{x.model} {x.error:.4f}" for x in recs)
        print(f"{r.scene} light {r.light} level {r.level}: {errs}", flush=True)

    rep = run_benchmark(cfg, workers=rc.workers, progress=show)
    rep.write(rc.out, rc.out.rsplit(".", 1)[0] + ".json")
    print(rep.table_text())
    print(f"{len(rep.records)} runs, {rep.failed} failed, {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
