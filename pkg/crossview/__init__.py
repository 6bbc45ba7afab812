import importlib.metadata
import logging
import os
import platform

try:
    __version__ = importlib.metadata.version("crossview")
except importlib.metadata.PackageNotFoundError:
    __version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())


def _configure_threads():
    """
    Pins BLAS pools to one thread on ARM with NumPy < 2, where the small
    matrices of the desk-scale models run slower multi-threaded. Variables the
    user already set win.
    """
    try:
        machine = platform.machine().lower()
        is_arm = "arm" in machine or "aarch64" in machine
        is_numpy_old = int(importlib.metadata.version("numpy").split(".")[0]) < 2
    except Exception:
        return

    if is_arm and is_numpy_old:
        for name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ.setdefault(name, "1")
        logging.getLogger(__name__).warning("NumPy < 2 on ARM: BLAS limited to one thread")


_configure_threads()
