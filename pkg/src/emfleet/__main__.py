import sys

from emfleet.cli import main

sys.exit(main())
