import sys

from imbalanced_supcon.cli import main

if __name__ == "__main__":
    sys.exit(main())
