"""Exception hierarchy. Each class maps to one CLI exit code."""


class ArealSSMError(Exception):
    exit_code = 1


class ValidationError(ArealSSMError, ValueError):
    """Invalid user input: structure, parameter domain, configuration."""

    exit_code = 2


class StructuralInputError(ValidationError):
    pass


class ParameterDomainError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class IngestionError(ValidationError):
    pass


class NumericalError(ArealSSMError, ArithmeticError):
    """A factorization failed or a matrix lost positive definiteness.

    ``t`` is the time index and ``min_eig`` the smallest eigenvalue (or pivot)
    of the offending matrix, when known.
    """

    exit_code = 3

    def __init__(self, message, t=None, min_eig=None, iteration=None, block=None):
        self.t = t
        self.min_eig = min_eig
        self.iteration = iteration
        self.block = block
        parts = [message]
        if t is not None:
            parts.append(f"t={t}")
        if min_eig is not None:
            parts.append(f"min eigenvalue={min_eig:.3e}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if block is not None:
            parts.append(f"block={block}")
        super().__init__("; ".join(parts))

    def annotate(self, **kw):
        """Return a copy with extra context filled in."""
        fields = dict(t=self.t, min_eig=self.min_eig, iteration=self.iteration, block=self.block)
        fields.update({k: v for k, v in kw.items() if v is not None})
        base = str(self.args[0]).split("; ")[0] if self.args else "numerical failure"
        return NumericalError(base, **fields)


class DataIOError(ArealSSMError, OSError):
    exit_code = 4
