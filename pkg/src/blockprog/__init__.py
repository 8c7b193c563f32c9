"""Instruction following in a tabletop blocks world with neuro-symbolic manipulation programs."""

__version__ = "0.1.0"
