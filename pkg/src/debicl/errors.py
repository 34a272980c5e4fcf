class ConfigError(Exception):
    """Invalid experiment configuration or protocol mismatch.

    Raised before any side effects; the CLI maps it to exit code 2
    (runtime failures exit 3).
    """
