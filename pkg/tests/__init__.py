"""linkmpc test suite."""
