"""Placeholder, filled in during build."""
