"""Exception types shared by the file-format layer and the CLI."""


class ConfigError(ValueError):
    """Invalid configuration: bad flag values, malformed config files."""


class DataFormatError(ValueError):
    """Malformed input data: bad magic bytes, truncated stores, broken JSONL."""
