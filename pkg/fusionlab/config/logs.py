import logging
import threading

INVARIANTS = 'fusionlab.invariants'
LOG_FORMAT = '%(name)s: %(message)s'


class DebugBufferHandler(logging.Handler):
    """Feeds log records into the config's debug message history"""

    def __init__(self, config, level=logging.DEBUG):
        super().__init__(level)
        self.config = config
        self.setFormatter(logging.Formatter(LOG_FORMAT))

    def emit(self, record):
        try:
            self.config.add_debug_message(self.format(record))
        except Exception:
            self.handleError(record)


class InvariantMonitor(logging.Handler):
    """Counts violations reported on the invariants logger"""

    def __init__(self):
        super().__init__(logging.WARNING)
        self._lock = threading.Lock()
        self.violations = 0
        self.messages = []

    def emit(self, record):
        with self._lock:
            self.violations += 1
            self.messages.append(record.getMessage())


def setup_logging(config) -> InvariantMonitor:
    root = logging.getLogger('fusionlab')
    root.setLevel(logging.DEBUG if config.debug else logging.INFO)
    for h in list(root.handlers):
        if isinstance(h, DebugBufferHandler):
            root.removeHandler(h)
    root.addHandler(DebugBufferHandler(config))

    invariants = logging.getLogger(INVARIANTS)
    for h in list(invariants.handlers):
        if isinstance(h, InvariantMonitor):
            invariants.removeHandler(h)
    monitor = InvariantMonitor()
    invariants.addHandler(monitor)
    return monitor


def violation(message: str):
    logging.getLogger(INVARIANTS).error(message)
