"""fg-array-sim test suite."""
