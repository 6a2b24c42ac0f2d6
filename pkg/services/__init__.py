"""
Pipeline services: run-event logging, parallel execution, reporting
"""
