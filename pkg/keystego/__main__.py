import sys

from keystego.cli import main

sys.exit(main())
