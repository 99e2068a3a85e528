"""Synthesize the desk-scale phantom dataset used by the experiment scripts."""
import sys

from unsct.cli import main

if __name__ == "__main__":
    sys.exit(main(["synth", "--out", "data/desk128", "--size", "128", *sys.argv[1:]]))
