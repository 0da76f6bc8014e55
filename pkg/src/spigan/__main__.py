import sys

from spigan.cli import main

sys.exit(main())
