"""Test package for unite."""
