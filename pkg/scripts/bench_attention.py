#!/usr/bin/env python
"""Time the pooled attention block against dense attention at n=4096."""

import sys

from pst.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))
