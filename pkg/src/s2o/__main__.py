import sys

from s2o.cli import main

sys.exit(main())
