import sys

from vpgo.cli import run

sys.exit(run(sys.argv[1:]))
