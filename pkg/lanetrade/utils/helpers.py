import json
import logging
import math
from pathlib import Path
from threading import local

from appdirs import user_cache_dir

logger = logging.getLogger(__name__)

# absolute slack used on every feasibility test
TOLERANCE = 1e-9


class C:
    header = "\033[95m"
    blue = "\033[94m"
    okgreen = "\033[92m"
    gray = "\033[38;5;8m"
    fail = "\033[91m"
    end = "\033[0m"


def cached(func):
    """Memoize on positional/keyword arguments, one cache per thread."""
    cache = local()

    def wrapper(*args, **kwargs):
        key = args + tuple(kwargs.items())
        try:
            return cache.__dict__[key]
        except TypeError:  # unhashable arguments
            return func(*args, **kwargs)
        except KeyError:
            pass
        ret = func(*args, **kwargs)
        cache.__dict__[key] = ret
        return ret

    wrapper.__name__ = func.__name__
    wrapper.__doc__ = func.__doc__
    return wrapper


def cache_dir() -> Path:
    lanetrade_cache_dir = Path(user_cache_dir("lanetrade", "lanetrade"))
    if not lanetrade_cache_dir.is_dir():
        lanetrade_cache_dir.mkdir(parents=True, exist_ok=True)

    return lanetrade_cache_dir


def clean_float(x, digits=12):
    # -0.0 and float noise make byte-identical dumps flaky
    if isinstance(x, float):
        if not math.isfinite(x):
            return None
        x = round(x, digits)
        if x == 0:
            return 0.0
    return x


def dump_json(data, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def fmt_money(x):
    return f"{x:.4f}"


assert clean_float(-0.0) == 0.0
assert clean_float(1.0000000000001) == 1.0
