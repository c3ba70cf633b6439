"""Desk-scale laboratory for influence-function machinery, data-poisoning
attacks, and influential-noise training defenses."""

__version__ = "0.1.0"
