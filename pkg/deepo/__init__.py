"""
Package initialization for the DeePO library.
"""
