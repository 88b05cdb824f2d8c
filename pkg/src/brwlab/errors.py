"""Exception hierarchy shared by every brwlab module."""


class BrwlabError(Exception):
    """Base class for all library errors."""


class ModelError(BrwlabError):
    pass


class NoRootInWindow(ModelError):
    """psi has no zero above 1 inside the searched window."""


class DivergentPsi(ModelError):
    """psi became infinite before a root could be bracketed."""


class UnsupportedFamily(BrwlabError):
    pass


class HorizonTooShort(BrwlabError):
    pass


class PopulationOverflow(BrwlabError):
    pass


class BudgetExceeded(BrwlabError):
    pass


class Uncertified(BrwlabError):
    pass


class NotStabilized(BrwlabError):
    pass


class DegenerateWeights(BrwlabError):
    pass


class IllConditioned(BrwlabError):
    pass


class InsufficientESS(BrwlabError):
    pass


class EmptyExperiment(BrwlabError):
    pass


class MissingArtifact(BrwlabError):
    pass
