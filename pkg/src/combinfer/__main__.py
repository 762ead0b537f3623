import sys

from combinfer.cli import main

sys.exit(main())
