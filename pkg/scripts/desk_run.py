"""Synthesize the desk scene, train the full configuration and plot the report.

Equivalent to ``semsplat synth``, ``semsplat run`` and ``semsplat plot`` with
default settings; outputs land in ``--out``.
"""
import argparse
import sys
from pathlib import Path

from semsplat import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="desk_run")
    ap.add_argument("--config", default=None, help="optional TOML with [synth] and pipeline keys")
    args = ap.parse_args(argv)
    out = Path(args.out)
    cfg = ["--config", args.config] if args.config else []
    for step in (["synth", *cfg, "--out", str(out / "scene")],
                 ["run", "--scene", str(out / "scene"), *cfg, "--out", str(out / "run")],
                 ["plot", "--run", str(out / "run")]):
        code = cli.main(step)
        if code:
            return code
    print((out / "run" / "metrics.csv").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
