"""Bundled example models shipped as package data."""

from importlib import resources

BUNDLED = ("counterexample", "decoupled", "weakly_coupled")


def bundled_path(name):
    """Filesystem path of a bundled model config."""
    if name not in BUNDLED:
        raise KeyError(f"no bundled model {name!r}; choose from {BUNDLED}")
    return str(resources.files(__package__).joinpath(f"{name}.json"))


def load_bundled(name):
    from ..model import load_model

    return load_model(bundled_path(name))
