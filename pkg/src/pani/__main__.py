import sys

from pani.cli import main

sys.exit(main())
