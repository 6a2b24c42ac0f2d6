"""
Environment settings and pipeline configuration
"""
