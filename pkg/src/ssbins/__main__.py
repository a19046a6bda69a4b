import sys

from ssbins.cli import main

sys.exit(main())
