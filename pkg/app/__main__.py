"""
`python -m app <subcommand> --config <file>`.

BLAS thread counts must be fixed before numpy is first imported: reference
mode pins them to one so repeated runs are byte-identical.
"""
import json
import os
import sys

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _config_path(argv):
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _reference_mode(argv) -> bool:
    path = _config_path(argv)
    if path is None:
        return True
    try:
        with open(path, encoding="utf-8") as f:
            return bool(json.load(f).get("reference_mode", True))
    except (OSError, ValueError, AttributeError):
        # The CLI reports the broken config properly
        return True


def _configure_threads(argv) -> None:
    threads = "1" if _reference_mode(argv) else os.getenv("UNICON_THREADS", "")
    if not threads:
        return
    for name in THREAD_VARIABLES:
        os.environ[name] = threads


_configure_threads(sys.argv[1:])

from .cli import main  # noqa: E402

sys.exit(main())
