import sys

from dmfpca.cli import main

sys.exit(main())
