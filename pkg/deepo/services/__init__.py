"""
Numerical kernels, plant models, data handling and the learning algorithms.
"""
