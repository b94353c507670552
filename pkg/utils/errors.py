"""Exception types shared by the IPU toolkit and the exit codes the CLI maps them to."""


class IpuError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 1


class ValidationError(IpuError, ValueError):
    """Invalid input: bad distribution, mismatched shapes, bad config"""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ContractViolation(IpuError):
    """A precondition of an operation was not met by the caller"""


class ImageDecodeError(IpuError):
    exit_code = 2


class MalformedHeaderError(ImageDecodeError):
    pass


class UnsupportedMaxvalError(ImageDecodeError):
    pass


class TruncatedImageError(ImageDecodeError):
    pass


class ArtifactFormatError(IpuError):
    """Weights or code-set file with a bad magic, version or length"""

    exit_code = 2


class NumericError(IpuError, ArithmeticError):
    """Non-finite loss or gradient"""

    exit_code = 3


def raise_if_problems(problems):
    """Raise ValidationError when a validator returned any problems"""
    if problems:
        raise ValidationError(problems)
