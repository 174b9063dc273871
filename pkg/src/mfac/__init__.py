"""Actor-critic learning of mean field games and mean field control."""

__version__ = "0.1.0"
