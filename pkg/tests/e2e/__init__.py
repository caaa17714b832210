"""End-to-end tests for the texture path optimizer CLI."""
