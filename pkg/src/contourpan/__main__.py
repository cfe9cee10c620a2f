import sys

from contourpan.cli import main

sys.exit(main())
