"""Domain error hierarchy.

Every error raised by this package for a *domain* reason (bad input file,
degenerate data, violated precondition) derives from :class:`NeurofuseError`
so the CLI can map them to exit code 1 uniformly.  Programming errors keep
their builtin types.
"""


class NeurofuseError(Exception):
    """Base class for all domain errors raised by neurofuse."""
