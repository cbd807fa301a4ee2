"""Configuration, CLI, metrics persistence and plotting."""
