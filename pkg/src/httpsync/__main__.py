import sys

from httpsync.cli import main

sys.exit(main())
