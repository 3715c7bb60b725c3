import sys

from flaggnn.cli import main

sys.exit(main())
