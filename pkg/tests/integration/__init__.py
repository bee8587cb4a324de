"""End-to-end acceptance tests for fg-array-sim."""
