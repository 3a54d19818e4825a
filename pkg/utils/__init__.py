"""
Data pipeline, metrics, 2.5D rendering, run configuration and file I/O
"""
