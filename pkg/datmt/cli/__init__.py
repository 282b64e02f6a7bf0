"""CLI module for datmt"""

from .main import main

__all__ = ['main']
