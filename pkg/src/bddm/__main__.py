import sys

from bddm.cli import main

sys.exit(main())
