import sys

from richwasm.cli import main

sys.exit(main())
