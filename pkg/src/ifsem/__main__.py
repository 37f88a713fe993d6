import sys

from ifsem.cli import main

sys.exit(main())
