import sys

from hmlab.cli import main

sys.exit(main())
