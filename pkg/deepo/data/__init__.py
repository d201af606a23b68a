"""
Plain-text matrix fixtures.
"""
