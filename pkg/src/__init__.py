"""Top-level package for the multi-context steganalysis lab."""
