import sys

from rareeval.cli import main

sys.exit(main())
