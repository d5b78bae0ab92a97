"""Slow planning loop: scene text, case memory, language planner, directives."""
