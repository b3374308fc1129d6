import sys

from qbus.cli import main

sys.exit(main())
