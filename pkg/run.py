import sys

from shockadjoint.experiment_cli import main

if __name__ == "__main__":
    # Same entry point as `python -m shockadjoint`
    sys.exit(main(sys.argv[1:]))
