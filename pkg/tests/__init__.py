"""Test package for sdmreg."""
