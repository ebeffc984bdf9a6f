"""Command line, datasets and experiment drivers."""
