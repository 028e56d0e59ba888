import sys

from posemetric.cli import main

sys.exit(main())
