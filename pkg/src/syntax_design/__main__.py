import sys

from syntax_design.cli import main

sys.exit(main())
