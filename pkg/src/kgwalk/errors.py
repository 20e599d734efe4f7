"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``TrainingError`` -> 3.
"""


class KGWalkError(Exception):
    pass


class DataError(KGWalkError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class ConfigError(KGWalkError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TrainingError(KGWalkError):
    """Non-finite loss or gradient during optimization."""
