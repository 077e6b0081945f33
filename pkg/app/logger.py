import logging
import os
from datetime import datetime
from logging.handlers import TimedRotatingFileHandler


def setup_logger(log_dir: str = ".logs", verbose: bool = False) -> None:
    """
    Set up the logger configuration for the application.

    Logs are written to both a timed rotating file handler and a stream handler.

    - Logs are saved to files in ``log_dir`` with a one-day rotation.
    - The console (stream) handler displays logs on the console.

    :param log_dir: Directory for the log files, created when missing.
    :param verbose: Log at DEBUG instead of INFO.
    :return: None
    """
    os.makedirs(log_dir, exist_ok=True)

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',  # noqa
        handlers=[
            TimedRotatingFileHandler(
                filename=os.path.join(log_dir, f"{datetime.now().strftime('%Y-%m-%d_%H-%M-%S')}.log"),
                when="midnight",
                interval=1,
                backupCount=7,  # Keep logs for 7 days
            ),
            logging.StreamHandler(),
        ],
        force=True,
    )
