"""Unit tests for fg-array-sim."""
