"""Tabletop tidying: a semantic planner grounded by a learned pairwise tidiness score."""

__version__ = "0.1.0"
