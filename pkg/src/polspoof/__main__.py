import sys

from polspoof.cli import main

sys.exit(main())
