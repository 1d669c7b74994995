"""Developer logging.

Everything here is silent unless ``PUSCHSIM_DEV`` is set in the
environment. In dev mode messages go to the textual devtools console
(``textual console``).
"""
import os
import time
from contextlib import contextmanager

from textual import log as textual_log

DEBUG = bool(os.getenv('PUSCHSIM_DEV', False))


def log(value, *args):
    """By default, the log doesn't do anything."""
    pass


if DEBUG:

    def log(value, *args):
        """Log to dev console when in debug mode.

        Extra positional arguments are %-formatted into ``value``.
        """
        if args:
            value = value % args
        textual_log(f'[puschsim] {value}')


@contextmanager
def timed(label):
    """Log how long the wrapped block took."""
    start = time.perf_counter()
    try:
        yield
    finally:
        log('%s took %.3fs', label, time.perf_counter() - start)
