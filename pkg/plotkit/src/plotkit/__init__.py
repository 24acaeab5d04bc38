"""plotkit: deterministic figures from sgdlab experiment artifacts."""

__version__ = "0.1.0"

from .recipes import FAMILIES, FigureRecipe, SchemaError, check, recipe_for_artifact, render  # noqa: F401
