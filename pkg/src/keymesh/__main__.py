import sys

from keymesh.cli import main

sys.exit(main())
