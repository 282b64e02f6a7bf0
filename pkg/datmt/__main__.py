"""Entry point for python -m datmt"""

import sys
from datmt.cli.main import main

if __name__ == '__main__':
    sys.exit(main())
