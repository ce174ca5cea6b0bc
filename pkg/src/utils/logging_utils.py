import logging
import sys

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'


def setup_logging(log_file=None, level=logging.INFO):
    """Configure the root logger for the CLI.

    Logs always go to stderr; when ``log_file`` is given they are also
    written there. Calling this twice replaces the previous handlers.
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )
