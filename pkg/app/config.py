from dataclasses import dataclass

from environs import Env


@dataclass
class PathsConfig:
    """
    Data class representing where runs write their artifacts.

    Attributes:
    - OUTPUT_DIR (str): Root for datasets, models, reports and traces when a command gets no explicit path.
    - LOG_DIR (str): Directory of the rotating log files.
    """
    OUTPUT_DIR: str
    LOG_DIR: str


@dataclass
class Config:
    """
    Data class representing the overall configuration for the application.

    Algorithm settings are not read from the environment; they are dataclass defaults
    overridden by command-line flags.

    Attributes:
    - paths (PathsConfig): The output and log locations.
    """
    paths: PathsConfig


def load_config() -> Config:
    """
    Load the configuration from environment variables and return a Config object.

    :return: The Config object with loaded configuration.
    """
    env = Env()
    env.read_env()

    return Config(
        paths=PathsConfig(
            OUTPUT_DIR=env.str("TACDIFF_OUTPUT_DIR", default="runs"),
            LOG_DIR=env.str("TACDIFF_LOG_DIR", default=".logs"),
        ),
    )
