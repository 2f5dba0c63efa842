# utils/decorators.py
import sys
import logging
from functools import wraps

from gapscore.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def require_seed(f):
    """Refuse to run a stochastic subcommand without an explicit --seed"""
    @wraps(f)
    def decorated_function(args, *rest, **kwargs):
        if getattr(args, 'seed', None) is None:
            raise ConfigurationError(f"'{args.command}' is stochastic and requires --seed")
        return f(args, *rest, **kwargs)
    return decorated_function


def exit_codes(f):
    """Turn a command handler's exceptions into the CLI exit code plus one stderr line"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            result = f(*args, **kwargs)
            return EXIT_OK if result is None else result
        except ConfigurationError as e:
            print(f"gapscore: error: {type(e).__name__}: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except Exception as e:
            logger.debug("Command failed", exc_info=True)
            print(f"gapscore: error: {type(e).__name__}: {e}", file=sys.stderr)
            return EXIT_RUNTIME
    return decorated_function
