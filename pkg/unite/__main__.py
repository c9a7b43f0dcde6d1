import sys

from unite.cli import main

sys.exit(main())
