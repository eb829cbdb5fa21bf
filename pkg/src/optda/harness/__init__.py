"""Configuration, experiment drivers, self-test and CLI."""
