"""
Utility helpers: seeded random streams and file I/O.
"""
