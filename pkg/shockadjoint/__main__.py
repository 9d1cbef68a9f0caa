import sys

from shockadjoint.experiment_cli import main

sys.exit(main())
