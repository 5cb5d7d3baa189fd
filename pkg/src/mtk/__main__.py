"""python -m mtk runs the command line interface."""

import sys

from mtk.cli import main

if __name__ == "__main__":
    sys.exit(main())
