"""Desk-scale shared-autonomy remote manipulation testbed."""

from importlib import resources


def fixture_path(name: str):
    """Path to a bundled fixture file."""
    return resources.files("benthic") / "fixtures" / name
