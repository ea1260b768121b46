import sys
import unittest

from richwasm.util.utils import configure_logging


if __name__ == '__main__':
    configure_logging(0)
    loader = unittest.TestLoader()
    suite = loader.discover(start_dir='tests', pattern='test_*.py', top_level_dir='.')

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)
    sys.exit(0 if result.wasSuccessful() else 1)
