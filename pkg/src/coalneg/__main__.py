import sys

from coalneg.cli import main

sys.exit(main())
