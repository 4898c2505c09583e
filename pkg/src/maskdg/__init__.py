"""Adversarial edge masking on feature-enriched graphs for
domain-generalizing node classification, with executable oracles for the
robust-optimization view of the training game."""

__version__ = "0.1.0"
