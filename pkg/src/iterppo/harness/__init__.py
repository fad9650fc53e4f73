"""Command-line driver, configuration, persistence and the verification suite."""
