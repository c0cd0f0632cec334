"""Trace-driven fluid simulation and evaluation backends."""
