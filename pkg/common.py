import hashlib
import logging
import signal
from contextlib import contextmanager
from pathlib import Path
from typing import Union

import numpy as np

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def setup_logging(level: Union[str, int] = "INFO") -> None:
    """
    Configure the root logger once for command-line use.
    """
    if isinstance(level, str):
        level = getattr(logging, level.upper())
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def stable_key(key) -> int:
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """
    Independent generator for (seed, *keys). Streams with different keys never share state.
    """
    entropy = [int(seed)] + [stable_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


@contextmanager
def ctrl_c_handler(signal_handler=None):
    class ctrl_c_state:
        def __init__(self):
            self._caught_ctrl_c = False

        def __bool__(self):
            return self._caught_ctrl_c

    state = ctrl_c_state()

    def _handler(sig, frame):
        state._caught_ctrl_c = True
        if signal_handler:
            signal_handler()

    original_sigint_handler = signal.getsignal(signal.SIGINT)
    signal.signal(signal.SIGINT, _handler)

    try:
        yield state
    finally:
        signal.signal(signal.SIGINT, original_sigint_handler)
