import sys

from cmdp_lab.harness import main

sys.exit(main())
