import sys

from trainvar.cli import main

sys.exit(main())
