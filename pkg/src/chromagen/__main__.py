import sys

from chromagen.cli import main

sys.exit(main())
