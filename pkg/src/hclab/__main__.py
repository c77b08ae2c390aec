import sys

from hclab.lab import main

sys.exit(main())
