"""Simulator for a Java-like concurrent calculus on non-cache-coherent many-core machines."""

from .syntax import load_program, parse_program, print_program

__all__ = ["load_program", "parse_program", "print_program"]
