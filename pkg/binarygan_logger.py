import logging
import os


class CustomLogger(logging.Logger):
    """
    Project-wide logger.
    Attributes:
        name : The logger name.
    """

    def __init__(self, name: str = "binarygan"):
        super().__init__(name)
        level = os.environ.get("BINARYGAN_LOG_LEVEL", "INFO").upper()
        self.setLevel(getattr(logging, level, logging.INFO))

        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        self.addHandler(handler)
        self.propagate = False


logger = CustomLogger()
