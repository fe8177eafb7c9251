"""Shared fixtures for the finemask tests."""
