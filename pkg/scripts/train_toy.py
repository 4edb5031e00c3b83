#!/usr/bin/env python
"""Train the toy classifier on the synthetic quadrant dataset.

Equivalent to `pst train-toy`; kept as a script so the experiment is one
file to read, tweak, and rerun.
"""

import sys

from pst.cli import main

if __name__ == "__main__":
    sys.exit(main(["train-toy", *sys.argv[1:]]))
