from typing import Iterable, Optional, Sequence


class ConsistencyError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(ConsistencyError):
    pass


class MalformedTemplateError(ConsistencyError):
    pass


class ContradictionError(ConsistencyError):
    def __init__(self, atom: str, line: Optional[int] = None):
        self.atom = atom
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"Contradictory grounding for {atom}{where}: both polarities given")


class RulesSyntaxError(ConsistencyError):
    def __init__(self, message: str, line: int, column: int, expected: Sequence[str] = ()):
        self.line = line
        self.column = column
        self.expected = tuple(sorted(expected))
        hint = f"; expected one of: {', '.join(self.expected)}" if self.expected else ""
        super().__init__(f"line {line}, column {column}: {message}{hint}")


class RulesSemanticError(ConsistencyError):
    def __init__(self, message: str, identifier: str, line: Optional[int] = None):
        self.identifier = identifier
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class MissingClassError(ConsistencyError):
    def __init__(self, classes: Iterable[int]):
        self.classes = tuple(sorted(classes))
        super().__init__(f"No labeled records for class(es): {', '.join(map(str, self.classes))}")


class OrderingError(ConsistencyError):
    pass


class GenerationError(ConsistencyError):
    pass


class UndefinedCifError(ConsistencyError):
    def __init__(self):
        super().__init__("CIF is undefined when no inconsistencies were recorded before fine-tuning (n_b = 0)")
