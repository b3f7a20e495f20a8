import sys

from fabmon.surface.cli import main

sys.exit(main())
