import sys

from spvb.cli import main

sys.exit(main())
