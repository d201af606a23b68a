"""
DeePO experiment runner
"""
import sys

from deepo.cli import main

if __name__ == "__main__":
    sys.exit(main())
