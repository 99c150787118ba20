"""Conditional distribution equality tests built on a mixture-density-network generator."""
