import sys

from chargenoise.cli import main

sys.exit(main())
