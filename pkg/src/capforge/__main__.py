import sys

from capforge.cli import main

sys.exit(main())
