"""
Artifact persistence for pipeline runs
"""
