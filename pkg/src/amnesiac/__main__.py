import sys

from amnesiac.harness.cli import main

sys.exit(main())
