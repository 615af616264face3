"""Prompt templates, shipped as versioned files next to this module."""

from importlib import resources


def load_prompt(name: str) -> str:
    """Read a prompt template by stem, e.g. ``load_prompt("agent_a")``."""
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
