import sys

from defectforge.cli import main

sys.exit(main())
