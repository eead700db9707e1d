"""Shared error base classes.

Concrete errors live next to the code that raises them; everything domain-level
derives from :class:`RadAssistError` so callers (CLI, HTTP service) can map a
failure to its name without caring which module produced it.
"""


class RadAssistError(Exception):
    """Base for all domain errors raised by this package."""

    @property
    def name(self) -> str:
        return type(self).__name__


class ConfigError(RadAssistError):
    """Bad or missing configuration (files, flags, environment variables)."""
